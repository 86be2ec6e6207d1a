//! Exact scene flow from simulator states.
//!
//! Each grid keypoint is cast into frame 0 of `cameras`; the surface it
//! lands on is advected by that entity's translation, projected into
//! `cam_ref`, and differenced. Keypoints that leave the reference image
//! (or pass behind it) are clamped to the border and flagged invalid.
//! Keypoints that see only background carry zero flow.

use nalgebra::Vector3;

use super::render::{cast, surfaces, Entity};
use super::sim::WorldState;
use crate::camera::CameraPose;
use crate::error::{LampError, Result};
use crate::motionrep::{make_grid, snap, tracks_to_increments, GridSpec, SceneFlowField, TrackSet};

fn entity_position(state: &WorldState, e: Entity) -> [f64; 3] {
    match e {
        Entity::Table => [0.0; 3],
        Entity::Goal(i) => state.goals[i].pos,
        Entity::Object(i) => state.objects[i].pos,
        Entity::Gripper => state.gripper.pos,
    }
}

pub struct FlowSample {
    pub field: SceneFlowField,
    pub valid: Vec<bool>,
    /// Reference-frame tracks `(u, v, d)` after clamping, `[K][T+1]`.
    pub tracks: TrackSet,
}

pub fn ground_truth_flow(states: &[WorldState], cameras: &[CameraPose], cam_ref: &CameraPose, grid: &GridSpec) -> Result<FlowSample> {
    let frames = grid.horizon + 1;
    if states.len() != frames || cameras.len() != frames {
        return Err(LampError::Contract(format!(
            "flow over T={} needs {frames} states and cameras, got {} and {}",
            grid.horizon,
            states.len(),
            cameras.len()
        )));
    }
    let keypoints = make_grid(grid)?;
    let surf = surfaces(&states[0]);
    let (w, h) = (grid.image_width as f64, grid.image_height as f64);
    let mut valid = vec![true; keypoints.len()];
    let mut data = Vec::with_capacity(keypoints.len() * frames);
    for (k, &[u, v]) in keypoints.iter().enumerate() {
        let Some(hit) = cast(&surf, &cameras[0], u, v) else {
            // background: static, seen at the same pixel in every frame
            data.extend(std::iter::repeat([u, v, 0.0]).take(frames));
            continue;
        };
        let entity = surf[hit.surface].entity;
        let origin = entity_position(&states[0], entity);
        for s in states {
            let now = entity_position(s, entity);
            let p = hit.point + Vector3::new(now[0] - origin[0], now[1] - origin[1], now[2] - origin[2]);
            let uvd = match cam_ref.project(&p) {
                Some([pu, pv, d]) => {
                    if !(0.0..=w).contains(&pu) || !(0.0..=h).contains(&pv) {
                        valid[k] = false;
                    }
                    [pu.clamp(0.0, w), pv.clamp(0.0, h), d]
                }
                None => {
                    valid[k] = false;
                    data.last().copied().unwrap_or([u, v, 0.0])
                }
            };
            data.push(uvd.map(snap));
        }
    }
    let tracks = TrackSet::new(keypoints.len(), frames, data)?;
    let field = tracks_to_increments(&tracks, *grid)?;
    Ok(FlowSample { field, valid, tracks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Intrinsics;
    use crate::motionrep::increments_to_tracks;
    use crate::toyworld::render::default_camera;
    use crate::toyworld::sim::{reset, step, TaskSpec};
    use gradcore::Rng;

    fn grid() -> GridSpec {
        GridSpec::desk()
    }

    #[test]
    fn static_scene_static_camera_is_zero() {
        let s = reset(&TaskSpec::from_instruction(4).unwrap(), &mut Rng::new(0)).unwrap();
        let cam = default_camera(32, 32).unwrap();
        let states = vec![s; 9];
        let f = ground_truth_flow(&states, &vec![cam.clone(); 9], &cam, &grid()).unwrap();
        assert!(f.field.values().iter().all(|&x| x == 0.0));
        assert!(f.valid.iter().all(|&v| v));
    }

    #[test]
    fn translating_object_gives_constant_du() {
        // camera looking straight down from 1.5, u along world x
        let mut s = reset(&TaskSpec::from_instruction(4).unwrap(), &mut Rng::new(1)).unwrap();
        s.objects[0].pos = [0.3, 0.5, 0.02];
        s.objects[0].radius = 0.12;
        s.objects[1].pos = [0.9, 0.9, 0.02];
        s.gripper.pos = [0.9, 0.1, 0.3];
        let mut states = vec![s.clone()];
        for _ in 0..8 {
            let mut n = states.last().unwrap().clone();
            n.objects[0].pos[0] += 0.01;
            states.push(n);
        }
        let cam = default_camera(32, 32).unwrap();
        let f = ground_truth_flow(&states, &vec![cam.clone(); 9], &cam, &grid()).unwrap();
        let expect_du = 45.0 * 0.01 / (1.5 - 0.04);
        let mut seen = 0;
        for k in 0..64 {
            let [u, v] = make_grid(&grid()).unwrap()[k];
            let hit = cast(&surfaces(&s), &cam, u, v).unwrap();
            if surfaces(&s)[hit.surface].entity != Entity::Object(0) {
                continue;
            }
            seen += 1;
            for t in 0..8 {
                let [du, dv, dd] = f.field.get(k / 8, k % 8, t);
                assert!((du - expect_du).abs() < 1e-8, "{du} vs {expect_du}");
                assert!(dv.abs() < 1e-9 && dd.abs() < 1e-9);
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn moving_camera_static_scene_is_compensated() {
        let s = reset(&TaskSpec::from_instruction(7).unwrap(), &mut Rng::new(2)).unwrap();
        let k = Intrinsics {
            fx: 45.0,
            fy: 45.0,
            cx: 16.0,
            cy: 16.0,
        };
        let cams: Vec<CameraPose> = (0..9)
            .map(|i| {
                let a = i as f64 * 0.1;
                let eye = Vector3::new(0.5 + 0.3 * a.cos(), 0.5 + 0.3 * a.sin(), 1.4);
                CameraPose::look_at(eye, Vector3::new(0.5, 0.5, 0.0), Vector3::new(0.0, 1.0, 0.0), k).unwrap()
            })
            .collect();
        let f = ground_truth_flow(&vec![s; 9], &cams, &cams[0], &grid()).unwrap();
        assert!(f.field.values().iter().all(|x| x.abs() <= 1e-9));
    }

    #[test]
    fn advected_keypoints_match_projection() {
        let task = TaskSpec::from_instruction(3).unwrap();
        let mut s = reset(&task, &mut Rng::new(3)).unwrap();
        let o = s.objects[0];
        s.gripper.pos = [o.pos[0], o.pos[1], o.top()];
        s = step(&s, [0.0, 0.0, 0.0, 1.0]);
        let mut states = vec![s];
        for i in 0..8 {
            let a = [0.03, -0.02 * (i % 3) as f64, 0.04, 1.0];
            states.push(step(states.last().unwrap(), a));
        }
        let cam = default_camera(32, 32).unwrap();
        let f = ground_truth_flow(&states, &vec![cam.clone(); 9], &cam, &grid()).unwrap();
        let back = increments_to_tracks(&f.field, &f.tracks.anchors()).unwrap();
        let surf = surfaces(&states[0]);
        for (k, [u, v]) in make_grid(&grid()).unwrap().into_iter().enumerate() {
            if !f.valid[k] {
                continue;
            }
            let hit = cast(&surf, &cam, u, v).unwrap();
            let e = surf[hit.surface].entity;
            let p0 = entity_position(&states[0], e);
            for (t, st) in states.iter().enumerate() {
                let pt = entity_position(st, e);
                let p = hit.point + Vector3::new(pt[0] - p0[0], pt[1] - p0[1], pt[2] - p0[2]);
                let want = cam.project(&p).unwrap();
                let got = back.get(k, t);
                for i in 0..3 {
                    assert!((got[i] - want[i]).abs() <= 1e-6);
                }
            }
        }
    }
}
