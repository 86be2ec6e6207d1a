//! Motion foresight overlays: predicted keypoint tracks drawn over the
//! observation, colored from blue (first step) to red (last step).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use gradcore::Rng;

use crate::error::{LampError, Result};
use crate::motionrep::{increments_to_tracks, make_grid, GridSpec, SceneFlowField, TrackSet};
use crate::runtime::PolicyBundle;
use crate::toyworld::render::FAR_DEPTH;

/// Upsampling factor from observation pixels to output pixels.
pub const SCALE: usize = 8;

/// One straight piece of a keypoint track, in observation pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stroke {
    pub keypoint: usize,
    pub step: usize,
    pub from: [f64; 2],
    pub to: [f64; 2],
    pub rgb: [u8; 3],
}

/// Blue at `s = 0`, red at `s = 1`.
pub fn gradient(s: f64) -> [u8; 3] {
    let s = s.clamp(0.0, 1.0);
    [(255.0 * s).round() as u8, 0, (255.0 * (1.0 - s)).round() as u8]
}

/// Non-degenerate track segments. Keypoints that do not move produce none.
pub fn strokes(tracks: &TrackSet) -> Vec<Stroke> {
    let steps = tracks.frames.saturating_sub(1);
    let mut out = Vec::new();
    for k in 0..tracks.keypoints {
        for t in 0..steps {
            let a = tracks.get(k, t);
            let b = tracks.get(k, t + 1);
            if a[0] == b[0] && a[1] == b[1] {
                continue;
            }
            let s = if steps > 1 { t as f64 / (steps - 1) as f64 } else { 0.0 };
            out.push(Stroke {
                keypoint: k,
                step: t,
                from: [a[0], a[1]],
                to: [b[0], b[1]],
                rgb: gradient(s),
            });
        }
    }
    out
}

/// An observation with tracks to draw on top of it.
pub struct Overlay {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB bytes of the observation.
    pub background: Vec<[u8; 3]>,
    pub tracks: TrackSet,
}

impl Overlay {
    /// `obs` is the 4-channel observation (RGB planes then depth / far plane).
    pub fn new(grid: &GridSpec, obs: &[f32], field: &SceneFlowField) -> Result<Self> {
        let (w, h) = (grid.image_width, grid.image_height);
        let n = w * h;
        if obs.len() != 4 * n {
            return Err(LampError::Contract(format!("observation has {} values, expected {}", obs.len(), 4 * n)));
        }
        let byte = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
        let background = (0..n).map(|i| [byte(obs[i]), byte(obs[n + i]), byte(obs[2 * n + i])]).collect();
        let anchors: Vec<[f64; 3]> = make_grid(grid)?
            .into_iter()
            .map(|[u, v]| {
                let (c, r) = ((u as usize).min(w - 1), (v as usize).min(h - 1));
                [u, v, obs[3 * n + r * w + c] as f64 * FAR_DEPTH]
            })
            .collect();
        Ok(Overlay {
            width: w,
            height: h,
            background,
            tracks: increments_to_tracks(field, &anchors)?,
        })
    }

    fn anchors(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.tracks.keypoints).map(|k| {
            let p = self.tracks.get(k, 0);
            [p[0], p[1]]
        })
    }

    /// Binary portable pixmap (P6), `SCALE`× the observation size.
    pub fn to_ppm(&self) -> Vec<u8> {
        let (w, h) = (self.width * SCALE, self.height * SCALE);
        let mut px = vec![[0u8; 3]; w * h];
        for r in 0..h {
            for c in 0..w {
                px[r * w + c] = self.background[(r / SCALE) * self.width + c / SCALE];
            }
        }
        let mut put = |x: i64, y: i64, rgb: [u8; 3]| {
            if (0..w as i64).contains(&x) && (0..h as i64).contains(&y) {
                px[y as usize * w + x as usize] = rgb;
            }
        };
        let s = SCALE as f64;
        for st in strokes(&self.tracks) {
            let (x0, y0) = (st.from[0] * s, st.from[1] * s);
            let (x1, y1) = (st.to[0] * s, st.to[1] * s);
            let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
            for i in 0..=n {
                let f = i as f64 / n as f64;
                put((x0 + f * (x1 - x0)).floor() as i64, (y0 + f * (y1 - y0)).floor() as i64, st.rgb);
            }
        }
        for [u, v] in self.anchors() {
            let (x, y) = ((u * s).floor() as i64, (v * s).floor() as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    put(x + dx, y + dy, [255, 255, 255]);
                }
            }
        }
        let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
        out.extend(px.iter().flatten());
        out
    }

    /// Self-contained SVG in observation pixel units.
    pub fn to_svg(&self) -> String {
        let (w, h) = (self.width, self.height);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {w} {h}" shape-rendering="crispEdges">"#,
            w * SCALE,
            h * SCALE
        );
        let _ = writeln!(s, r#"<g id="observation">"#);
        for r in 0..h {
            for c in 0..w {
                let [cr, cg, cb] = self.background[r * w + c];
                let _ = writeln!(s, r#"<rect x="{c}" y="{r}" width="1" height="1" fill="rgb({cr},{cg},{cb})"/>"#);
            }
        }
        let _ = writeln!(s, "</g>\n<g id=\"tracks\" stroke-width=\"0.25\" stroke-linecap=\"round\">");
        for st in strokes(&self.tracks) {
            let [cr, cg, cb] = st.rgb;
            let _ = writeln!(
                s,
                r#"<line x1="{:.4}" y1="{:.4}" x2="{:.4}" y2="{:.4}" stroke="rgb({cr},{cg},{cb})"/>"#,
                st.from[0], st.from[1], st.to[0], st.to[1]
            );
        }
        let _ = writeln!(s, "</g>\n<g id=\"anchors\" fill=\"white\">");
        for [u, v] in self.anchors() {
            let _ = writeln!(s, r#"<circle cx="{u:.4}" cy="{v:.4}" r="0.3"/>"#);
        }
        s.push_str("</g>\n</svg>\n");
        s
    }
}

/// Parses a binary P6 header and checks the payload length. Returns
/// `(width, height)`.
pub fn check_ppm(bytes: &[u8]) -> Result<(usize, usize)> {
    let bad = || LampError::format("malformed PPM");
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if fields[0] != "P6" || max != 255 || bytes.len() != pos + 1 + 3 * w * h {
        return Err(bad());
    }
    Ok((w, h))
}

/// Full motion generation for one observation, written as `<stem>.ppm`
/// and `<stem>.svg`.
pub fn visualize_motion(bundle: &PolicyBundle, obs: &[f32], instruction: usize, seed: u64, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let m = &bundle.model;
    let z = m.percept.encode_tensor(&m.store, &[obs], &[instruction])?;
    let noise = m.motion.sample_noise::<f32>(1, &mut Rng::new(seed).fork(1));
    let field = m.motion.generate_flow(&m.store, &z, &bundle.schedule, &noise, &m.flow_norm)?.remove(0);
    let overlay = Overlay::new(&m.motion.grid, obs, &field)?;
    let ppm = stem.with_extension("ppm");
    let svg = stem.with_extension("svg");
    std::fs::write(&ppm, overlay.to_ppm())?;
    std::fs::write(&svg, overlay.to_svg())?;
    Ok((ppm, svg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec {
            rows: 4,
            cols: 4,
            horizon: 4,
            image_width: 16,
            image_height: 16,
        }
    }

    #[test]
    fn zero_flow_draws_only_anchors() {
        let g = grid();
        let obs = vec![0.5f32; 4 * 16 * 16];
        let ov = Overlay::new(&g, &obs, &SceneFlowField::zeros(g)).unwrap();
        assert!(strokes(&ov.tracks).is_empty());
        let svg = ov.to_svg();
        assert_eq!(svg.matches("<line").count(), 0);
        assert_eq!(svg.matches("<circle").count(), 16);
        assert_eq!(check_ppm(&ov.to_ppm()).unwrap(), (16 * SCALE, 16 * SCALE));
    }

    #[test]
    fn gradient_runs_blue_to_red() {
        assert_eq!(gradient(0.0), [0, 0, 255]);
        assert_eq!(gradient(1.0), [255, 0, 0]);
        let g = grid();
        let mut f = SceneFlowField::zeros(g);
        for t in 0..4 {
            f.set(0, 0, t, [1.0, 0.0, 0.0]);
        }
        let ov = Overlay::new(&g, &vec![0.0f32; 4 * 256], &f).unwrap();
        let s = strokes(&ov.tracks);
        assert_eq!(s.len(), 4);
        assert_eq!(s[0].rgb, [0, 0, 255]);
        assert_eq!(s[3].rgb, [255, 0, 0]);
    }

    #[test]
    fn truncated_ppm_is_rejected() {
        let g = grid();
        let mut bytes = Overlay::new(&g, &vec![0.0f32; 4 * 256], &SceneFlowField::zeros(g)).unwrap().to_ppm();
        bytes.pop();
        assert!(check_ppm(&bytes).is_err());
    }
}
