use gradcore::Rng;
use lamp::motionrep::GridSpec;
use lamp::toyworld::{default_camera, ground_truth_flow, render, reset, step, TaskSpec};
use lamp::visualize::{check_ppm, strokes, Overlay, SCALE};

fn grid() -> GridSpec {
    GridSpec {
        rows: 8,
        cols: 8,
        horizon: 4,
        image_width: 32,
        image_height: 32,
    }
}

/// Gripper sweeping sideways for the whole window.
fn scripted_overlay() -> (Overlay, lamp::toyworld::flow::FlowSample) {
    let g = grid();
    let cam = default_camera(g.image_width, g.image_height).unwrap();
    let task = TaskSpec::from_instruction(3).unwrap();
    let mut states = vec![reset(&task, &mut Rng::new(11)).unwrap()];
    for _ in 0..g.horizon {
        let next = step(states.last().unwrap(), [0.05, 0.03, 0.0, 0.0]);
        states.push(next);
    }
    let cams = vec![cam.clone(); g.horizon + 1];
    let flow = ground_truth_flow(&states, &cams, &cam, &g).unwrap();
    let obs = render(&states[0], &cam, g.image_width, g.image_height).to_observation();
    (Overlay::new(&g, &obs, &flow.field).unwrap(), flow)
}

#[test]
fn strokes_follow_ground_truth_tracks() {
    let (ov, flow) = scripted_overlay();
    let s = strokes(&ov.tracks);
    assert!(!s.is_empty(), "the moving gripper must leave strokes");
    for st in &s {
        let a = flow.tracks.get(st.keypoint, st.step);
        let b = flow.tracks.get(st.keypoint, st.step + 1);
        for c in 0..2 {
            assert!((st.to[c] - st.from[c] - (b[c] - a[c])).abs() < 1e-9, "stroke {st:?}");
        }
    }
}

#[test]
fn svg_is_well_formed_and_matches_strokes() {
    let (ov, _) = scripted_overlay();
    let svg = ov.to_svg();
    let doc = roxmltree::Document::parse(&svg).expect("valid XML");
    let root = doc.root_element();
    assert_eq!(root.tag_name().name(), "svg");
    let lines = doc.descendants().filter(|n| n.has_tag_name("line")).count();
    assert_eq!(lines, strokes(&ov.tracks).len());
    let rects = doc.descendants().filter(|n| n.has_tag_name("rect")).count();
    assert_eq!(rects, 32 * 32);
    assert_eq!(check_ppm(&ov.to_ppm()).unwrap(), (32 * SCALE, 32 * SCALE));
}
