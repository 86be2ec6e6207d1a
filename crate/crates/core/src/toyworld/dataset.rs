//! Demonstration datasets and the `LAMPDS1` container.
//!
//! Byte layout (all integers and floats little-endian):
//!
//! | field | type |
//! |---|---|
//! | magic `"LAMPDS1\0"` | 8 bytes |
//! | version | u32 (= 1) |
//! | record count R, episode count | u64, u64 |
//! | grid rows, cols, horizon T, image width W, image height H | 5 × u32 |
//! | action horizon, observation channels | 2 × u32 |
//! | flow mean, flow std | 3 × f64, 3 × f64 |
//! | action mean, action std | 4 × f64, 4 × f64 |
//! | index table | R × u64 absolute record offsets |
//! | records | R × fixed-size record |
//! | SHA-256 of every preceding byte | 32 bytes |
//!
//! A record is: episode, step, instruction (3 × u32), robot state
//! (4 × f32), action chunk (H_a × 4 × f32), keypoint validity (K × u8),
//! scene flow (rows × cols × T × 3 × f32), observation (4 × H × W × f32).

use std::io::Write;
use std::path::Path;

use gradcore::Rng;
use serde::{Deserialize, Serialize};

use super::expert::{scripted_expert, EXPERT_BUDGET};
use super::flow::ground_truth_flow;
use super::render::{default_camera, render};
use super::sim::{reset, step, task_success, TaskKind, TaskSpec, WorldState, NUM_INSTRUCTIONS};
use crate::error::{LampError, Result};
use crate::motionrep::{GridSpec, MotionNormalizer, SceneFlowField, STD_FLOOR};
use crate::util::sha256_hex;

pub const DATASET_MAGIC: &[u8; 8] = b"LAMPDS1\0";
pub const DATASET_VERSION: u32 = 1;
pub const OBS_CHANNELS: usize = 4;
pub const ACTION_DIM: usize = 4;
const HEADER_LEN: usize = 8 + 4 + 16 + 20 + 8 + 48 + 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionNormalizer {
    pub mean: [f64; ACTION_DIM],
    pub std: [f64; ACTION_DIM],
}

impl ActionNormalizer {
    pub fn identity() -> Self {
        ActionNormalizer {
            mean: [0.0; ACTION_DIM],
            std: [1.0; ACTION_DIM],
        }
    }

    pub fn normalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter().enumerate().map(|(i, &x)| (x - self.mean[i % 4]) / self.std[i % 4]).collect()
    }

    pub fn denormalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter().enumerate().map(|(i, &x)| x * self.std[i % 4] + self.mean[i % 4]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode: u32,
    pub step: u32,
    pub instruction: u32,
    pub state: [f32; 4],
    /// `[H_a][4]`: Δx, Δy, Δz, gripper command.
    pub actions: Vec<f32>,
    pub valid: Vec<bool>,
    /// Scene flow in motionrep layout.
    pub flow: Vec<f32>,
    /// `[4][H][W]`: RGB then depth over the far plane.
    pub obs: Vec<f32>,
}

impl EpisodeRecord {
    pub fn flow_field(&self, grid: GridSpec) -> Result<SceneFlowField> {
        SceneFlowField::new(grid, self.flow.iter().map(|&x| x as f64).collect())
    }

    pub fn robot_state(&self) -> [f64; 4] {
        self.state.map(|x| x as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub grid: GridSpec,
    pub action_horizon: usize,
    pub episodes: usize,
    pub flow_norm: MotionNormalizer,
    pub action_norm: ActionNormalizer,
}

impl DatasetHeader {
    pub fn record_len(&self) -> usize {
        let g = &self.grid;
        12 + 16 + self.action_horizon * ACTION_DIM * 4 + g.keypoints() + g.field_len() * 4 + OBS_CHANNELS * g.image_width * g.image_height * 4
    }

    pub fn obs_len(&self) -> usize {
        OBS_CHANNELS * self.grid.image_width * self.grid.image_height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<EpisodeRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DataConfig {
    pub episodes: usize,
    pub tasks: Vec<TaskKind>,
    pub grid: GridSpec,
    pub action_horizon: usize,
    /// Keep every n-th timestep of each demonstration.
    pub record_stride: usize,
    /// Give up if more than this fraction of demonstrations fail.
    pub max_failure_rate: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            episodes: 240,
            tasks: TaskKind::ALL.to_vec(),
            grid: GridSpec::desk(),
            action_horizon: 4,
            record_stride: 1,
            max_failure_rate: 0.05,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.tasks.is_empty() || self.action_horizon == 0 || self.record_stride == 0 {
            return Err(LampError::config("data config needs tasks, a positive action horizon and stride"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub episodes: usize,
    pub records: usize,
    pub expert_failures: usize,
}

/// Seed stream of episode `e`, attempt `a`.
pub fn episode_rng(seed: u64, episode: usize, attempt: usize) -> Rng {
    Rng::new(seed).fork(((episode as u64) << 16) | attempt as u64)
}

/// Runs the demonstrator to success or budget. Returns states `s_0..s_E`
/// and actions `a_0..a_{E-1}`, or `None` if it failed.
pub fn demonstrate(initial: WorldState, task: &TaskSpec, budget: usize) -> Option<(Vec<WorldState>, Vec<[f64; 4]>)> {
    let mut states = vec![initial];
    let mut actions = Vec::new();
    for _ in 0..budget {
        let s = states.last().unwrap();
        if task_success(s, task) {
            return Some((states, actions));
        }
        let a = scripted_expert(s, task);
        if a.failed {
            return None;
        }
        actions.push(a.action);
        states.push(step(s, a.action));
    }
    task_success(states.last().unwrap(), task).then_some((states, actions))
}

fn quantize(xs: impl IntoIterator<Item = f64>) -> Vec<f32> {
    xs.into_iter().map(|x| x as f32).collect()
}

pub fn generate_episodes(cfg: &DataConfig, seed: u64) -> Result<(Dataset, GenerationLog)> {
    cfg.validate()?;
    let grid = cfg.grid;
    let cam = default_camera(grid.image_width, grid.image_height)?;
    let cams = vec![cam.clone(); grid.horizon + 1];
    let mut log = GenerationLog::default();
    let mut records = Vec::new();
    for e in 0..cfg.episodes {
        let kind = cfg.tasks[e % cfg.tasks.len()];
        let mut attempt = 0;
        let (task, states, actions) = loop {
            let mut rng = episode_rng(seed, e, attempt);
            let task = TaskSpec::sample(kind, &mut rng);
            let init = reset(&task, &mut rng)?;
            if let Some((s, a)) = demonstrate(init, &task, EXPERT_BUDGET) {
                break (task, s, a);
            }
            attempt += 1;
            log.expert_failures += 1;
            let tried = e + 1 + log.expert_failures;
            if log.expert_failures as f64 > cfg.max_failure_rate * tried as f64 + 1.0 {
                return Err(LampError::Generation(format!(
                    "demonstrator failed {} of {tried} episodes",
                    log.expert_failures
                )));
            }
        };
        let last_state = states.last().unwrap().clone();
        let last_grip = actions.last().map_or(0.0, |a| a[3]);
        for t in (0..actions.len()).step_by(cfg.record_stride) {
            let window: Vec<WorldState> = (0..=grid.horizon)
                .map(|i| states.get(t + i).cloned().unwrap_or_else(|| last_state.clone()))
                .collect();
            let flow = ground_truth_flow(&window, &cams, &cam, &grid)?;
            let mut chunk = Vec::with_capacity(cfg.action_horizon * ACTION_DIM);
            for i in 0..cfg.action_horizon {
                let a = actions.get(t + i).copied().unwrap_or([0.0, 0.0, 0.0, last_grip]);
                chunk.extend_from_slice(&a);
            }
            let frame = render(&states[t], &cam, grid.image_width, grid.image_height);
            records.push(EpisodeRecord {
                episode: e as u32,
                step: t as u32,
                instruction: task.instruction as u32,
                state: states[t].robot_state().map(|x| x as f32),
                actions: quantize(chunk),
                valid: flow.valid,
                flow: quantize(flow.field.values().iter().copied()),
                obs: frame.to_observation(),
            });
        }
        log.episodes += 1;
    }
    log.records = records.len();
    let flow_norm = fit_flow_normalizer(&records, grid)?;
    let action_norm = fit_action_normalizer(&records);
    let header = DatasetHeader {
        grid,
        action_horizon: cfg.action_horizon,
        episodes: cfg.episodes,
        flow_norm,
        action_norm,
    };
    Ok((Dataset { header, records }, log))
}

/// Statistics over valid keypoints; identity when there is no data.
pub fn fit_flow_normalizer(records: &[EpisodeRecord], grid: GridSpec) -> Result<MotionNormalizer> {
    if records.iter().all(|r| !r.valid.iter().any(|&v| v)) {
        return Ok(MotionNormalizer::identity());
    }
    let fields: Vec<SceneFlowField> = records.iter().map(|r| r.flow_field(grid)).collect::<Result<_>>()?;
    MotionNormalizer::fit(fields.iter().zip(records).map(|(f, r)| (f, Some(r.valid.as_slice()))))
}

pub fn fit_action_normalizer(records: &[EpisodeRecord]) -> ActionNormalizer {
    let mut n = 0usize;
    let mut sum = [0.0f64; 4];
    let mut sq = [0.0f64; 4];
    for r in records {
        for a in r.actions.chunks(ACTION_DIM) {
            for i in 0..ACTION_DIM {
                let x = a[i] as f64;
                sum[i] += x;
                sq[i] += x * x;
            }
            n += 1;
        }
    }
    if n == 0 {
        return ActionNormalizer::identity();
    }
    let mut out = ActionNormalizer::identity();
    for i in 0..ACTION_DIM {
        let m = sum[i] / n as f64;
        out.mean[i] = m;
        out.std[i] = (sq[i] / n as f64 - m * m).max(0.0).sqrt().max(STD_FLOOR);
    }
    out
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices of the first `episodes − holdout` episodes and of the
    /// remaining held-out episodes.
    pub fn split(&self, holdout_episodes: usize) -> (Vec<usize>, Vec<usize>) {
        let cut = self.header.episodes.saturating_sub(holdout_episodes) as u32;
        (0..self.records.len()).partition(|&i| self.records[i].episode < cut)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let g = &h.grid;
        let rec_len = h.record_len();
        let mut out = Vec::with_capacity(HEADER_LEN + self.records.len() * (8 + rec_len) + 32);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.extend_from_slice(&(h.episodes as u64).to_le_bytes());
        for x in [g.rows, g.cols, g.horizon, g.image_width, g.image_height, h.action_horizon, OBS_CHANNELS] {
            out.extend_from_slice(&(x as u32).to_le_bytes());
        }
        for x in h.flow_norm.mean.iter().chain(&h.flow_norm.std).chain(&h.action_norm.mean).chain(&h.action_norm.std) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        debug_assert_eq!(out.len(), HEADER_LEN);
        let data_start = HEADER_LEN + 8 * self.records.len();
        for i in 0..self.records.len() {
            out.extend_from_slice(&((data_start + i * rec_len) as u64).to_le_bytes());
        }
        for r in &self.records {
            let before = out.len();
            for x in [r.episode, r.step, r.instruction] {
                out.extend_from_slice(&x.to_le_bytes());
            }
            let lens = [
                (r.actions.len(), h.action_horizon * ACTION_DIM, "actions"),
                (r.valid.len(), g.keypoints(), "validity"),
                (r.flow.len(), g.field_len(), "flow"),
                (r.obs.len(), h.obs_len(), "observation"),
            ];
            for (got, want, what) in lens {
                if got != want {
                    return Err(LampError::Contract(format!("record {what} has {got} entries, expected {want}")));
                }
            }
            for x in r.state.iter().chain(&r.actions) {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out.extend(r.valid.iter().map(|&v| v as u8));
            for x in r.flow.iter().chain(&r.obs) {
                out.extend_from_slice(&x.to_le_bytes());
            }
            debug_assert_eq!(out.len() - before, rec_len);
        }
        let digest = sha2_digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + 32 {
            return Err(LampError::format("dataset truncated"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        let digest = sha2_digest(body);
        if digest[..] != trailer[..] {
            return Err(LampError::Checksum {
                stored: hex(trailer),
                computed: hex(&digest),
            });
        }
        let mut rd = Reader { buf: body, pos: 0 };
        if rd.take(8)? != DATASET_MAGIC {
            return Err(LampError::format("bad dataset magic"));
        }
        let version = rd.u32()?;
        if version != DATASET_VERSION {
            return Err(LampError::format(format!("unsupported dataset version {version}")));
        }
        let count = rd.u64()? as usize;
        let episodes = rd.u64()? as usize;
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = rd.u32()? as usize;
        }
        let grid = GridSpec {
            rows: dims[0],
            cols: dims[1],
            horizon: dims[2],
            image_width: dims[3],
            image_height: dims[4],
        };
        grid.validate()?;
        if dims[6] != OBS_CHANNELS {
            return Err(LampError::format(format!("expected {OBS_CHANNELS} channels, found {}", dims[6])));
        }
        let mut stats = [0.0f64; 14];
        for s in &mut stats {
            *s = rd.f64()?;
        }
        let header = DatasetHeader {
            grid,
            action_horizon: dims[5],
            episodes,
            flow_norm: MotionNormalizer {
                mean: [stats[0], stats[1], stats[2]],
                std: [stats[3], stats[4], stats[5]],
            },
            action_norm: ActionNormalizer {
                mean: [stats[6], stats[7], stats[8], stats[9]],
                std: [stats[10], stats[11], stats[12], stats[13]],
            },
        };
        let rec_len = header.record_len();
        let data_start = HEADER_LEN + 8 * count;
        if body.len() != data_start + count * rec_len {
            return Err(LampError::format(format!(
                "dataset body is {} bytes, expected {}",
                body.len(),
                data_start + count * rec_len
            )));
        }
        for i in 0..count {
            let off = rd.u64()? as usize;
            if off != data_start + i * rec_len {
                return Err(LampError::format(format!("index entry {i} points to {off}")));
            }
        }
        let (ha, k, fl, ol) = (header.action_horizon * ACTION_DIM, grid.keypoints(), grid.field_len(), header.obs_len());
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let (episode, step, instruction) = (rd.u32()?, rd.u32()?, rd.u32()?);
            if instruction as usize >= NUM_INSTRUCTIONS {
                return Err(LampError::format(format!("instruction id {instruction} out of range")));
            }
            let st = rd.f32s(4)?;
            let actions = rd.f32s(ha)?;
            let valid = rd.take(k)?.iter().map(|&b| b != 0).collect();
            let flow = rd.f32s(fl)?;
            let obs = rd.f32s(ol)?;
            records.push(EpisodeRecord {
                episode,
                step,
                instruction,
                state: [st[0], st[1], st[2], st[3]],
                actions,
                valid,
                flow,
                obs,
            });
        }
        Ok(Dataset { header, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn checksum(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

/// Generates a dataset and writes it to `path`.
pub fn generate_dataset(cfg: &DataConfig, seed: u64, path: &Path) -> Result<(Dataset, GenerationLog)> {
    let (ds, log) = generate_episodes(cfg, seed)?;
    ds.save(path)?;
    Ok((ds, log))
}

fn sha2_digest(bytes: &[u8]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).into()
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(LampError::format("unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DataConfig {
        DataConfig {
            episodes: 3,
            record_stride: 5,
            ..DataConfig::default()
        }
    }

    #[test]
    fn empty_dataset_round_trips() {
        let cfg = DataConfig {
            episodes: 0,
            ..DataConfig::default()
        };
        let (ds, log) = generate_episodes(&cfg, 1).unwrap();
        assert_eq!(log.records, 0);
        let back = Dataset::from_bytes(&ds.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = generate_episodes(&tiny(), 7).unwrap().0.to_bytes().unwrap();
        let b = generate_episodes(&tiny(), 7).unwrap().0.to_bytes().unwrap();
        assert_eq!(a, b);
        let c = generate_episodes(&tiny(), 8).unwrap().0.to_bytes().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stored_normalizer_matches_payload() {
        let (ds, _) = generate_episodes(&tiny(), 3).unwrap();
        let back = Dataset::from_bytes(&ds.to_bytes().unwrap()).unwrap();
        let refit = fit_flow_normalizer(&back.records, back.header.grid).unwrap();
        for c in 0..3 {
            assert!((refit.mean[c] - back.header.flow_norm.mean[c]).abs() <= 1e-6);
            assert!((refit.std[c] - back.header.flow_norm.std[c]).abs() <= 1e-6);
        }
    }

    #[test]
    fn corrupted_byte_is_detected() {
        let (ds, _) = generate_episodes(&tiny(), 4).unwrap();
        let mut bytes = ds.to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(Dataset::from_bytes(&bytes), Err(LampError::Checksum { .. })));
    }
}
