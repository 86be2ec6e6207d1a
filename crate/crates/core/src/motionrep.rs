//! Dense 3D scene flow on a uniform keypoint grid.
//!
//! A [`SceneFlowField`] stores per-keypoint, per-timestep increments
//! `(Δu, Δv, Δd)` in layout `[rows][cols][T][3]`. Track coordinates and
//! increments live on a dyadic lattice of spacing [`TRACK_QUANTUM`] so that
//! differencing and prefix-summing are exact inverses in `f64`.
//!
//! Motion tokens group each 2×2 block of keypoints: token `(t, pr, pc)` holds
//! keypoints `(2pr + dr, 2pc + dc)` for `(dr, dc)` in row-major order
//! `(0,0), (0,1), (1,0), (1,1)`, channels innermost, so feature
//! `(2*dr + dc) * 3 + c`. Tokens are ordered time-major: index
//! `t * (rows/2) * (cols/2) + pr * (cols/2) + pc`.

use gradcore::{Real, Tensor};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraPose, MIN_DEPTH};
use crate::error::{LampError, Result};

/// Lattice spacing for track values: 2⁻³².
pub const TRACK_QUANTUM: f64 = 1.0 / 4_294_967_296.0;
/// Largest magnitude for which lattice sums stay exact.
pub const TRACK_LIMIT: f64 = 1_048_576.0;
pub const CHANNELS: usize = 3;
pub const PATCH: usize = 2;
pub const TOKEN_DIM: usize = PATCH * PATCH * CHANNELS;

/// Rounds `x` to the track lattice.
#[inline]
pub fn snap(x: f64) -> f64 {
    (x / TRACK_QUANTUM).round() * TRACK_QUANTUM
}

fn check_track_value(x: f64) -> Result<()> {
    if !x.is_finite() || x.abs() > TRACK_LIMIT {
        return Err(LampError::Contract(format!("track value {x} is non-finite or exceeds ±{TRACK_LIMIT}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Keypoint rows (K_h).
    pub rows: usize,
    /// Keypoint columns (K_w).
    pub cols: usize,
    /// Future timesteps (T).
    pub horizon: usize,
    pub image_width: usize,
    pub image_height: usize,
}

impl GridSpec {
    pub fn desk() -> Self {
        GridSpec {
            rows: 8,
            cols: 8,
            horizon: 8,
            image_width: 32,
            image_height: 32,
        }
    }

    pub fn paper_scale() -> Self {
        GridSpec {
            rows: 20,
            cols: 20,
            horizon: 32,
            image_width: 224,
            image_height: 224,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.horizon == 0 {
            return Err(LampError::config(format!("grid extents must be positive: {self:?}")));
        }
        if self.rows % PATCH != 0 || self.cols % PATCH != 0 {
            return Err(LampError::config(format!(
                "grid {}x{} must have even extents for 2x2 patches",
                self.rows, self.cols
            )));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(LampError::config("image extent must be positive"));
        }
        Ok(())
    }

    pub fn keypoints(&self) -> usize {
        self.rows * self.cols
    }

    pub fn tokens_per_step(&self) -> usize {
        (self.rows / PATCH) * (self.cols / PATCH)
    }

    pub fn num_tokens(&self) -> usize {
        self.horizon * self.tokens_per_step()
    }

    pub fn field_len(&self) -> usize {
        self.keypoints() * self.horizon * CHANNELS
    }
}

/// Keypoint pixel positions `(u, v)`, row-major, on a uniform lattice with
/// half-cell margins.
pub fn make_grid(spec: &GridSpec) -> Result<Vec<[f64; 2]>> {
    spec.validate()?;
    let cw = spec.image_width as f64 / spec.cols as f64;
    let ch = spec.image_height as f64 / spec.rows as f64;
    let mut pts = Vec::with_capacity(spec.keypoints());
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            pts.push([(c as f64 + 0.5) * cw, (r as f64 + 0.5) * ch]);
        }
    }
    Ok(pts)
}

/// Per-keypoint point tracks over `frames` frames, `[K][frames][3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    pub keypoints: usize,
    pub frames: usize,
    data: Vec<[f64; 3]>,
}

impl TrackSet {
    /// Values are snapped to the track lattice.
    pub fn new(keypoints: usize, frames: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != keypoints * frames || frames == 0 {
            return Err(LampError::Contract(format!(
                "track set needs {keypoints}x{frames} points, got {}",
                data.len()
            )));
        }
        for p in &data {
            for &x in p {
                check_track_value(x)?;
            }
        }
        let data = data.into_iter().map(|p| p.map(snap)).collect();
        Ok(TrackSet { keypoints, frames, data })
    }

    /// Builds tracks without snapping; used for raw world-space points.
    pub fn raw(keypoints: usize, frames: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != keypoints * frames || frames == 0 {
            return Err(LampError::Contract(format!(
                "track set needs {keypoints}x{frames} points, got {}",
                data.len()
            )));
        }
        Ok(TrackSet { keypoints, frames, data })
    }

    pub fn get(&self, k: usize, f: usize) -> [f64; 3] {
        self.data[k * self.frames + f]
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn anchors(&self) -> Vec<[f64; 3]> {
        (0..self.keypoints).map(|k| self.get(k, 0)).collect()
    }
}

/// Dense scene flow `M ∈ R^{rows × cols × T × 3}` of `(Δu, Δv, Δd)` increments.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFlowField {
    pub grid: GridSpec,
    values: Vec<f64>,
}

impl SceneFlowField {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.field_len() {
            return Err(LampError::Contract(format!(
                "scene flow needs {} values, got {}",
                grid.field_len(),
                values.len()
            )));
        }
        if let Some(x) = values.iter().find(|x| !x.is_finite()) {
            return Err(LampError::Contract(format!("non-finite scene flow value {x}")));
        }
        Ok(SceneFlowField { grid, values })
    }

    pub fn zeros(grid: GridSpec) -> Self {
        SceneFlowField {
            grid,
            values: vec![0.0; grid.field_len()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn offset(&self, row: usize, col: usize, t: usize) -> usize {
        ((row * self.grid.cols + col) * self.grid.horizon + t) * CHANNELS
    }

    pub fn get(&self, row: usize, col: usize, t: usize) -> [f64; 3] {
        let o = self.offset(row, col, t);
        [self.values[o], self.values[o + 1], self.values[o + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, t: usize, v: [f64; 3]) {
        let o = self.offset(row, col, t);
        self.values[o..o + 3].copy_from_slice(&v);
    }

    /// Total displacement of keypoint `k` over the horizon.
    pub fn cumulative(&self, k: usize) -> [f64; 3] {
        let (r, c) = (k / self.grid.cols, k % self.grid.cols);
        let mut acc = [0.0; 3];
        for t in 0..self.grid.horizon {
            let v = self.get(r, c, t);
            for i in 0..3 {
                acc[i] += v[i];
            }
        }
        acc
    }
}

/// `increment[t] = track[t+1] − track[t]`.
pub fn tracks_to_increments(tracks: &TrackSet, grid: GridSpec) -> Result<SceneFlowField> {
    grid.validate()?;
    if tracks.keypoints != grid.keypoints() || tracks.frames != grid.horizon + 1 {
        return Err(LampError::Contract(format!(
            "tracks {}x{} do not match grid {}x{} with T={}",
            tracks.keypoints, tracks.frames, grid.rows, grid.cols, grid.horizon
        )));
    }
    let mut values = Vec::with_capacity(grid.field_len());
    for k in 0..tracks.keypoints {
        for t in 0..grid.horizon {
            let (a, b) = (tracks.get(k, t), tracks.get(k, t + 1));
            for i in 0..3 {
                values.push(b[i] - a[i]);
            }
        }
    }
    SceneFlowField::new(grid, values)
}

/// Prefix sums of increments starting from `anchors`. Increments and
/// anchors are snapped to the track lattice first.
pub fn increments_to_tracks(field: &SceneFlowField, anchors: &[[f64; 3]]) -> Result<TrackSet> {
    let g = field.grid;
    if anchors.len() != g.keypoints() {
        return Err(LampError::Contract(format!(
            "{} anchors for {} keypoints",
            anchors.len(),
            g.keypoints()
        )));
    }
    let frames = g.horizon + 1;
    let mut data = Vec::with_capacity(g.keypoints() * frames);
    for (k, anchor) in anchors.iter().enumerate() {
        let mut cur = anchor.map(snap);
        for &x in &cur {
            check_track_value(x)?;
        }
        data.push(cur);
        let (r, c) = (k / g.cols, k % g.cols);
        for t in 0..g.horizon {
            let inc = field.get(r, c, t);
            for i in 0..3 {
                cur[i] += snap(inc[i]);
                check_track_value(cur[i])?;
            }
            data.push(cur);
        }
    }
    Ok(TrackSet {
        keypoints: g.keypoints(),
        frames,
        data,
    })
}

/// Projects world-space tracks into the reference camera as `(u, v, d)`.
/// One pose per frame is required; world coordinates are already
/// independent of the per-frame cameras, so the result does not depend on
/// them.
pub fn to_reference_frame(tracks_world: &TrackSet, cam_per_frame: &[CameraPose], cam_ref: &CameraPose) -> Result<TrackSet> {
    if cam_per_frame.len() != tracks_world.frames {
        return Err(LampError::Contract(format!(
            "{} camera poses for {} frames",
            cam_per_frame.len(),
            tracks_world.frames
        )));
    }
    let mut data = Vec::with_capacity(tracks_world.points().len());
    for k in 0..tracks_world.keypoints {
        for f in 0..tracks_world.frames {
            let [x, y, z] = tracks_world.get(k, f);
            data.push(project_or_err(cam_ref, &Vector3::new(x, y, z), k, f)?);
        }
    }
    TrackSet::new(tracks_world.keypoints, tracks_world.frames, data)
}

/// Re-expresses per-frame observations `(u, v, d)` seen by `cam_per_frame[f]`
/// in the reference camera, cancelling camera motion.
pub fn observed_to_reference_frame(tracks_obs: &TrackSet, cam_per_frame: &[CameraPose], cam_ref: &CameraPose) -> Result<TrackSet> {
    if cam_per_frame.len() != tracks_obs.frames {
        return Err(LampError::Contract(format!(
            "{} camera poses for {} frames",
            cam_per_frame.len(),
            tracks_obs.frames
        )));
    }
    let mut data = Vec::with_capacity(tracks_obs.points().len());
    for k in 0..tracks_obs.keypoints {
        for (f, cam) in cam_per_frame.iter().enumerate() {
            let world = cam.unproject(tracks_obs.get(k, f));
            data.push(project_or_err(cam_ref, &world, k, f)?);
        }
    }
    TrackSet::new(tracks_obs.keypoints, tracks_obs.frames, data)
}

fn project_or_err(cam: &CameraPose, p: &Vector3<f64>, keypoint: usize, frame: usize) -> Result<[f64; 3]> {
    cam.project(p).ok_or_else(|| LampError::Projection {
        keypoint,
        frame,
        depth: cam.world_to_camera(p).z.min(MIN_DEPTH),
    })
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionNormalizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub const STD_FLOOR: f64 = 1e-6;

impl MotionNormalizer {
    pub fn identity() -> Self {
        MotionNormalizer {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Fits statistics over every keypoint whose `valid` flag is set (all
    /// keypoints when `valid` is `None`).
    pub fn fit<'a>(fields: impl IntoIterator<Item = (&'a SceneFlowField, Option<&'a [bool]>)>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for (field, valid) in fields {
            let g = field.grid;
            for k in 0..g.keypoints() {
                if valid.is_some_and(|v| !v[k]) {
                    continue;
                }
                for t in 0..g.horizon {
                    let v = field.get(k / g.cols, k % g.cols, t);
                    for c in 0..3 {
                        sum[c] += v[c];
                        sq[c] += v[c] * v[c];
                    }
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(LampError::config("cannot fit a normalizer on no data"));
        }
        let mut out = Self::identity();
        for c in 0..3 {
            let mean = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - mean * mean).max(0.0);
            out.mean[c] = mean;
            out.std[c] = var.sqrt().max(STD_FLOOR);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s >= STD_FLOOR) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(LampError::config(format!("normalizer not fitted: {self:?}")));
        }
        Ok(())
    }
}

pub fn normalize(field: &SceneFlowField, norm: &MotionNormalizer) -> Result<SceneFlowField> {
    norm.validate()?;
    let values = field
        .values()
        .iter()
        .enumerate()
        .map(|(i, &x)| (x - norm.mean[i % 3]) / norm.std[i % 3])
        .collect();
    SceneFlowField::new(field.grid, values)
}

pub fn denormalize(field: &SceneFlowField, norm: &MotionNormalizer) -> Result<SceneFlowField> {
    norm.validate()?;
    let values = field
        .values()
        .iter()
        .enumerate()
        .map(|(i, &x)| x * norm.std[i % 3] + norm.mean[i % 3])
        .collect();
    SceneFlowField::new(field.grid, values)
}

/// Zeroes the Δd channel; Δu and Δv are untouched.
pub fn mask_depth(field: &SceneFlowField) -> SceneFlowField {
    let mut out = field.clone();
    for v in out.values.chunks_mut(3) {
        v[2] = 0.0;
    }
    out
}

/// `[T × rows/2 × cols/2 × 12]` motion tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionTokens {
    pub grid: GridSpec,
    values: Vec<f64>,
}

impl MotionTokens {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.num_tokens() * TOKEN_DIM {
            return Err(LampError::Contract(format!(
                "motion tokens need {} values, got {}",
                grid.num_tokens() * TOKEN_DIM,
                values.len()
            )));
        }
        Ok(MotionTokens { grid, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.num_tokens()
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::new(
            &[self.num_tokens(), TOKEN_DIM],
            self.values.iter().map(|&x| F::of(x)).collect(),
        )
        .expect("token shape")
    }

    pub fn from_tensor<F: Real>(grid: GridSpec, t: &Tensor<F>) -> Result<Self> {
        Self::new(grid, t.to_f64_vec())
    }
}

fn token_index(grid: &GridSpec, row: usize, col: usize, t: usize, c: usize) -> usize {
    let (pr, dr) = (row / PATCH, row % PATCH);
    let (pc, dc) = (col / PATCH, col % PATCH);
    let pcols = grid.cols / PATCH;
    let token = t * grid.tokens_per_step() + pr * pcols + pc;
    token * TOKEN_DIM + (dr * PATCH + dc) * CHANNELS + c
}

pub fn patchify(field: &SceneFlowField) -> Result<MotionTokens> {
    let g = field.grid;
    g.validate()?;
    let mut out = vec![0.0; g.num_tokens() * TOKEN_DIM];
    for r in 0..g.rows {
        for c in 0..g.cols {
            for t in 0..g.horizon {
                let v = field.get(r, c, t);
                for ch in 0..CHANNELS {
                    out[token_index(&g, r, c, t, ch)] = v[ch];
                }
            }
        }
    }
    MotionTokens::new(g, out)
}

pub fn unpatchify(tokens: &MotionTokens) -> Result<SceneFlowField> {
    let g = tokens.grid;
    let mut field = SceneFlowField::zeros(g);
    for r in 0..g.rows {
        for c in 0..g.cols {
            for t in 0..g.horizon {
                let mut v = [0.0; 3];
                for (ch, slot) in v.iter_mut().enumerate() {
                    *slot = tokens.values[token_index(&g, r, c, t, ch)];
                }
                field.set(r, c, t, v);
            }
        }
    }
    if field.values.iter().any(|x| !x.is_finite()) {
        return Err(LampError::Contract("non-finite motion token".into()));
    }
    Ok(field)
}

/// Per-keypoint validity expanded to token features (1.0 valid, 0.0 not).
pub fn token_weights(grid: &GridSpec, valid: &[bool]) -> Vec<f64> {
    let mut w = vec![0.0; grid.num_tokens() * TOKEN_DIM];
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            if !valid[r * grid.cols + c] {
                continue;
            }
            for t in 0..grid.horizon {
                for ch in 0..CHANNELS {
                    w[token_index(grid, r, c, t, ch)] = 1.0;
                }
            }
        }
    }
    w
}
