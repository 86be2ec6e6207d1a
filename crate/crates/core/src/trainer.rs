//! Two-stage training.
//!
//! Stage 1 fits the perception stub and the Motion Expert jointly on the
//! flow-matching objective over normalized, patchified scene flow. Stage 2
//! freezes both, harvests one-step motion hidden states without a tape,
//! and trains guidance plus the Action Expert on chunks with action flow
//! time drawn from Beta(α, β).

use std::time::Instant;

use gradcore::{clip_grad_norm, AdamWConfig, CosineSchedule, OptimizerState, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{LampConfig, OptimConfig};
use crate::error::{LampError, Result};
use crate::flowmatch::{flow_matching_loss, interpolate_rows, FlowTimeSampler, SolverSchedule};
use crate::model::{Model, STAGE1_PREFIXES, STAGE2_PREFIXES};
use crate::motionrep::{mask_depth, normalize, patchify, token_weights, TOKEN_DIM};
use crate::toyworld::dataset::ACTION_DIM;
use crate::toyworld::Dataset;
use crate::{motion_expert, percept};

/// Records used for the fixed before/after probe loss.
const PROBE_RECORDS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: String,
    pub steps: Vec<StepRecord>,
    /// Wall time of each step in milliseconds; kept out of the loss trace.
    pub wall_ms: Vec<f64>,
    /// Objective on a fixed probe batch (fixed noise and flow times) at
    /// initialization and after the last step.
    pub probe_initial: f64,
    pub probe_final: f64,
}

impl TrainLog {
    /// Deterministic loss trace: `step,loss,lr` per line.
    pub fn trace_text(&self) -> String {
        let mut s = String::from("step,loss,lr\n");
        for r in &self.steps {
            s.push_str(&format!("{},{:?},{:?}\n", r.step, r.loss, r.lr));
        }
        s
    }

    /// Run manifest, one JSON object per step including wall time.
    pub fn manifest_jsonl(&self) -> String {
        let mut s = String::new();
        for (r, w) in self.steps.iter().zip(&self.wall_ms) {
            let line = serde_json::json!({ "stage": self.stage, "step": r.step, "loss": r.loss, "lr": r.lr, "wall_ms": w });
            s.push_str(&line.to_string());
            s.push('\n');
        }
        s
    }

    pub fn probe_ratio(&self) -> f64 {
        self.probe_final / self.probe_initial
    }
}

fn check_dataset(cfg: &LampConfig, data: &Dataset) -> Result<()> {
    if data.header.grid != cfg.grid() {
        return Err(LampError::config(format!(
            "dataset grid {:?} does not match configured grid {:?}",
            data.header.grid,
            cfg.grid()
        )));
    }
    if data.header.action_horizon != cfg.action.horizon {
        return Err(LampError::config(format!(
            "dataset chunk length {} does not match action horizon {}",
            data.header.action_horizon, cfg.action.horizon
        )));
    }
    Ok(())
}

fn optimizer(o: &OptimConfig) -> (OptimizerState<f32>, CosineSchedule) {
    let opt = OptimizerState::new(AdamWConfig {
        lr: o.lr,
        betas: (o.beta1, o.beta2),
        eps: 1e-8,
        weight_decay: o.weight_decay,
    });
    let sched = CosineSchedule {
        base: o.lr,
        floor: o.lr * o.min_lr_ratio,
        total_steps: o.steps,
    };
    (opt, sched)
}

fn sample_batch(pool: &[usize], batch: usize, rng: &mut Rng) -> Vec<usize> {
    (0..batch).map(|_| pool[rng.below(pool.len())]).collect()
}

/// Inputs of the Stage-1 objective for a set of records.
pub struct MotionBatch<'a> {
    pub obs: Vec<&'a [f32]>,
    pub instructions: Vec<usize>,
    /// Normalized motion tokens `[B, L_m, 12]`.
    pub tokens: Tensor<f32>,
    /// Per-element weights; zero on invalid keypoints.
    pub weights: Vec<f64>,
}

pub fn motion_batch<'a>(model: &Model<f32>, data: &'a Dataset, idx: &[usize], depth_mask: bool) -> Result<MotionBatch<'a>> {
    let grid = data.header.grid;
    let mut tokens = Vec::with_capacity(idx.len() * grid.num_tokens() * TOKEN_DIM);
    let mut weights = Vec::with_capacity(tokens.capacity());
    for &i in idx {
        let r = &data.records[i];
        let mut f = normalize(&r.flow_field(grid)?, &model.flow_norm)?;
        if depth_mask {
            f = mask_depth(&f);
        }
        tokens.extend(patchify(&f)?.values().iter().map(|&x| x as f32));
        weights.extend(token_weights(&grid, &r.valid));
    }
    Ok(MotionBatch {
        obs: idx.iter().map(|&i| data.records[i].obs.as_slice()).collect(),
        instructions: idx.iter().map(|&i| data.records[i].instruction as usize).collect(),
        tokens: Tensor::new(&[idx.len(), grid.num_tokens(), TOKEN_DIM], tokens)?,
        weights,
    })
}

/// Weighted flow-matching loss of the Motion Expert on one batch.
pub fn motion_loss(model: &Model<f32>, tape: &mut Tape<f32>, batch: &MotionBatch, noise: &Tensor<f32>, taus: &[f64]) -> Result<Var> {
    let z = model.percept.encode(tape, &model.store, &batch.obs, &batch.instructions)?;
    let xt = tape.constant(interpolate_rows(noise, &batch.tokens, taus)?);
    let out = model.motion.forward(tape, &model.store, xt, taus, z)?;
    flow_matching_loss(tape, out.velocity, &batch.tokens, noise, Some(&batch.weights))
}

fn optimizer_step(model: &mut Model<f32>, opt: &mut OptimizerState<f32>, tape: &Tape<f32>, loss: Var, clip: f64, lr: f64) -> Result<()> {
    let grads = tape.backward(loss)?;
    model.store.zero_grads();
    model.store.absorb_grads(tape, &grads);
    if clip > 0.0 {
        clip_grad_norm(&mut model.store, clip);
    }
    opt.set_lr(lr);
    opt.step(&mut model.store)?;
    Ok(())
}

fn checked(step: usize, loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(LampError::Diverged { step, loss })
    }
}

fn probe_pool(pool: &[usize], rng: &mut Rng) -> Vec<usize> {
    let mut p = pool.to_vec();
    rng.shuffle(&mut p);
    p.truncate(PROBE_RECORDS);
    p
}

/// Stage 1. Returns the trained model (Stage-1 parameters trainable,
/// the rest untouched) and its log.
pub fn train_stage1(cfg: &LampConfig, data: &Dataset) -> Result<(Model<f32>, TrainLog)> {
    cfg.validate()?;
    check_dataset(cfg, data)?;
    let s1 = &cfg.stage1;
    let mut model = Model::new(cfg, data.header.flow_norm, data.header.action_norm)?;
    model.train_only(&STAGE1_PREFIXES);
    let (train_idx, _) = data.split(s1.holdout_episodes);
    if train_idx.is_empty() && s1.optim.steps > 0 {
        return Err(LampError::config("stage 1 has no training records"));
    }

    let root = Rng::new(cfg.seed).fork(0x5731);
    let sampler = FlowTimeSampler::new(s1.flow_time_alpha, s1.flow_time_beta)?;
    let probe = if train_idx.is_empty() {
        None
    } else {
        let mut prng = root.fork(1);
        let idx = probe_pool(&train_idx, &mut prng);
        let batch = motion_batch(&model, data, &idx, s1.depth_mask)?;
        let noise = model.motion.sample_noise(idx.len(), &mut prng);
        let taus: Vec<f64> = (0..idx.len()).map(|_| sampler.sample(&mut prng).tau()).collect();
        Some((batch, noise, taus))
    };
    let probe_loss = |model: &Model<f32>| -> Result<f64> {
        match &probe {
            Some((b, n, t)) => {
                let mut tape = Tape::no_grad();
                let l = motion_loss(model, &mut tape, b, n, t)?;
                Ok(tape.value(l).item() as f64)
            }
            None => Ok(f64::NAN),
        }
    };
    let probe_initial = probe_loss(&model)?;

    let (mut opt, sched) = optimizer(&s1.optim);
    let mut rng = root.fork(2);
    let mut log = TrainLog {
        stage: "stage1".into(),
        steps: Vec::with_capacity(s1.optim.steps),
        wall_ms: Vec::with_capacity(s1.optim.steps),
        probe_initial,
        probe_final: probe_initial,
    };
    for step in 0..s1.optim.steps {
        let start = Instant::now();
        let idx = sample_batch(&train_idx, s1.optim.batch, &mut rng);
        let batch = motion_batch(&model, data, &idx, s1.depth_mask)?;
        let noise = model.motion.sample_noise(idx.len(), &mut rng);
        let taus: Vec<f64> = (0..idx.len()).map(|_| sampler.sample(&mut rng).tau()).collect();
        let mut tape = Tape::new();
        let loss = motion_loss(&model, &mut tape, &batch, &noise, &taus)?;
        let value = checked(step, tape.value(loss).item() as f64)?;
        let lr = sched.lr(step);
        optimizer_step(&mut model, &mut opt, &tape, loss, s1.optim.clip, lr)?;
        log.steps.push(StepRecord { step, loss: value, lr });
        log.wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    log.probe_final = probe_loss(&model)?;
    Ok((model, log))
}

/// Tensors feeding the Stage-2 objective.
pub struct ActionInputs {
    pub z: Tensor<f32>,
    pub z_m: Option<Tensor<f32>>,
    pub state: Tensor<f32>,
    /// Normalized demonstration chunks `[B, H, 4]`.
    pub actions: Tensor<f32>,
    pub noise: Tensor<f32>,
    pub taus: Vec<f64>,
    pub t1: f64,
}

/// Encodes the batch with the frozen perception stub and, in guided modes,
/// one tape-free Motion Expert step from fresh noise; draws the action noise
/// and flow times from `rng`.
pub fn action_inputs(model: &Model<f32>, data: &Dataset, idx: &[usize], rng: &mut Rng) -> Result<ActionInputs> {
    let cfg = &model.cfg.stage2;
    let schedule = SolverSchedule::new(cfg.solver_steps)?;
    let sampler = FlowTimeSampler::new(cfg.flow_time_alpha, cfg.flow_time_beta)?;
    let obs: Vec<&[f32]> = idx.iter().map(|&i| data.records[i].obs.as_slice()).collect();
    let instr: Vec<usize> = idx.iter().map(|&i| data.records[i].instruction as usize).collect();
    let z = model.percept.encode_tensor(&model.store, &obs, &instr)?;
    let z_m = if model.guidance.mode().uses_motion() {
        let m0 = model.motion.sample_noise(idx.len(), rng);
        Some(model.motion.one_step_hidden(&model.store, &z, &m0)?)
    } else {
        None
    };
    let h = model.cfg.action.horizon;
    let mut actions = Vec::with_capacity(idx.len() * h * ACTION_DIM);
    let mut state = Vec::with_capacity(idx.len() * 4);
    for &i in idx {
        let r = &data.records[i];
        let a: Vec<f64> = r.actions.iter().map(|&x| x as f64).collect();
        actions.extend(model.action_norm.normalize(&a).into_iter().map(|x| x as f32));
        state.extend_from_slice(&r.state);
    }
    let noise = model.action.sample_noise(idx.len(), rng);
    let taus = (0..idx.len()).map(|_| sampler.sample(rng).tau()).collect();
    Ok(ActionInputs {
        z,
        z_m,
        state: Tensor::new(&[idx.len(), 4], state)?,
        actions: Tensor::new(&[idx.len(), h, ACTION_DIM], actions)?,
        noise,
        taus,
        t1: schedule.first_step().tau(),
    })
}

/// Guidance followed by the action flow-matching loss. Returns the loss.
pub fn action_objective(model: &Model<f32>, tape: &mut Tape<f32>, inputs: &ActionInputs) -> Result<Var> {
    let z = tape.constant(inputs.z.clone());
    let zm = inputs.z_m.as_ref().map(|m| tape.constant(m.clone()));
    let zg = model.guidance.forward(tape, &model.store, z, zm)?;
    let state = tape.constant(inputs.state.clone());
    let t1 = vec![inputs.t1; inputs.taus.len()];
    model
        .action
        .action_loss(tape, &model.store, &inputs.actions, &inputs.noise, &inputs.taus, zg, state, &t1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeReport {
    pub percept_before: u64,
    pub percept_after: u64,
    pub motion_before: u64,
    pub motion_after: u64,
}

impl FreezeReport {
    pub fn intact(&self) -> bool {
        self.percept_before == self.percept_after && self.motion_before == self.motion_after
    }
}

fn verify_frozen(model: &Model<f32>, percept_hash: u64, motion_hash: u64) -> Result<()> {
    for (component, prefix, before) in [("perception encoder", percept::PREFIX, percept_hash), ("motion expert", motion_expert::PREFIX, motion_hash)] {
        let after = model.fingerprint(prefix);
        if after != before {
            return Err(LampError::FrozenDrift {
                component: component.into(),
                before,
                after,
            });
        }
    }
    Ok(())
}

/// Stage 2 on top of a Stage-1 checkpoint. Only guidance and Action Expert
/// parameters move; frozen hashes are verified every
/// `freeze_check_every` steps and at the end.
pub fn train_stage2(cfg: &LampConfig, data: &Dataset, stage1: &Checkpoint) -> Result<(Model<f32>, TrainLog, FreezeReport)> {
    cfg.validate()?;
    check_dataset(cfg, data)?;
    stage1.check_compatible(cfg)?;
    if stage1.snapshot.flow_norm != data.header.flow_norm {
        return Err(LampError::config("stage-1 checkpoint was trained on a dataset with different flow statistics"));
    }
    let s2 = &cfg.stage2;
    let mut model = Model::new(cfg, data.header.flow_norm, data.header.action_norm)?;
    stage1.apply(&mut model.store)?;
    model.train_only(&STAGE2_PREFIXES);
    let percept_hash = model.fingerprint(percept::PREFIX);
    let motion_hash = model.fingerprint(motion_expert::PREFIX);

    let (train_idx, _) = data.split(s2.holdout_episodes);
    if train_idx.is_empty() && s2.optim.steps > 0 {
        return Err(LampError::config("stage 2 has no training records"));
    }
    let root = Rng::new(cfg.seed).fork(0x5732);
    let probe = if train_idx.is_empty() {
        None
    } else {
        let mut prng = root.fork(1);
        let idx = probe_pool(&train_idx, &mut prng);
        Some(action_inputs(&model, data, &idx, &mut prng)?)
    };
    let probe_loss = |model: &Model<f32>| -> Result<f64> {
        match &probe {
            Some(inp) => {
                let mut tape = Tape::no_grad();
                let l = action_objective(model, &mut tape, inp)?;
                Ok(tape.value(l).item() as f64)
            }
            None => Ok(f64::NAN),
        }
    };
    let probe_initial = probe_loss(&model)?;

    let (mut opt, sched) = optimizer(&s2.optim);
    let mut rng = root.fork(2);
    let mut log = TrainLog {
        stage: "stage2".into(),
        steps: Vec::with_capacity(s2.optim.steps),
        wall_ms: Vec::with_capacity(s2.optim.steps),
        probe_initial,
        probe_final: probe_initial,
    };
    for step in 0..s2.optim.steps {
        let start = Instant::now();
        let idx = sample_batch(&train_idx, s2.optim.batch, &mut rng);
        let inputs = action_inputs(&model, data, &idx, &mut rng)?;
        let mut tape = Tape::new();
        let loss = action_objective(&model, &mut tape, &inputs)?;
        let value = checked(step, tape.value(loss).item() as f64)?;
        let lr = sched.lr(step);
        optimizer_step(&mut model, &mut opt, &tape, loss, s2.optim.clip, lr)?;
        log.steps.push(StepRecord { step, loss: value, lr });
        log.wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
        if s2.freeze_check_every > 0 && (step + 1) % s2.freeze_check_every == 0 {
            verify_frozen(&model, percept_hash, motion_hash)?;
        }
    }
    verify_frozen(&model, percept_hash, motion_hash)?;
    log.probe_final = probe_loss(&model)?;
    let report = FreezeReport {
        percept_before: percept_hash,
        percept_after: model.fingerprint(percept::PREFIX),
        motion_before: motion_hash,
        motion_after: model.fingerprint(motion_expert::PREFIX),
    };
    Ok((model, log, report))
}

/// Held-out flow error in raw units over valid keypoints: (generated, all-zero predictor).
pub fn heldout_flow_mse(model: &Model<f32>, data: &Dataset, idx: &[usize], seed: u64, depth_mask: bool) -> Result<(f64, f64)> {
    let grid = data.header.grid;
    let schedule = SolverSchedule::new(model.cfg.stage2.solver_steps)?;
    let mut rng = Rng::new(seed);
    let (mut model_se, mut zero_se, mut n) = (0.0, 0.0, 0usize);
    for chunk in idx.chunks(32) {
        let obs: Vec<&[f32]> = chunk.iter().map(|&i| data.records[i].obs.as_slice()).collect();
        let instr: Vec<usize> = chunk.iter().map(|&i| data.records[i].instruction as usize).collect();
        let z = model.percept.encode_tensor(&model.store, &obs, &instr)?;
        let fields = model.motion.generate_flow_rng(&model.store, &z, &schedule, &mut rng, &model.flow_norm)?;
        for (&i, gen) in chunk.iter().zip(&fields) {
            let r = &data.records[i];
            let truth = r.flow_field(grid)?;
            let channels = if depth_mask { 2 } else { 3 };
            for k in (0..grid.keypoints()).filter(|&k| r.valid[k]) {
                for t in 0..grid.horizon {
                    let (a, b) = (gen.get(k / grid.cols, k % grid.cols, t), truth.get(k / grid.cols, k % grid.cols, t));
                    for c in 0..channels {
                        model_se += (a[c] - b[c]).powi(2);
                        zero_se += b[c].powi(2);
                        n += 1;
                    }
                }
            }
        }
    }
    let n = n.max(1) as f64;
    Ok((model_se / n, zero_se / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::generate_episodes;

    fn tiny_data(cfg: &LampConfig) -> Dataset {
        generate_episodes(&cfg.data, cfg.seed).unwrap().0
    }

    #[test]
    fn zero_steps_leave_initialization() {
        let mut cfg = LampConfig::tiny();
        cfg.stage1.optim.steps = 0;
        let data = tiny_data(&cfg);
        let (m, log) = train_stage1(&cfg, &data).unwrap();
        let fresh: Model<f32> = Model::new(&cfg, data.header.flow_norm, data.header.action_norm).unwrap();
        assert_eq!(m.fingerprint(""), fresh.fingerprint(""));
        assert!(log.steps.is_empty());
    }

    #[test]
    fn schedule_starts_at_lr_and_decays_to_floor() {
        let cfg = LampConfig::tiny();
        let data = tiny_data(&cfg);
        let (_, log) = train_stage1(&cfg, &data).unwrap();
        assert_eq!(log.steps[0].lr, cfg.stage1.optim.lr);
        assert!(log.steps.windows(2).all(|w| w[1].lr <= w[0].lr));
        assert!(log.steps.iter().all(|r| r.lr >= cfg.stage1.optim.lr * cfg.stage1.optim.min_lr_ratio));
    }

    #[test]
    fn stage2_moves_only_its_own_parameters() {
        let cfg = LampConfig::tiny();
        let data = tiny_data(&cfg);
        let (m1, _) = train_stage1(&cfg, &data).unwrap();
        let ck = Checkpoint::capture(&m1, &STAGE1_PREFIXES, "stage1");
        let (m2, _, report) = train_stage2(&cfg, &data, &ck).unwrap();
        assert!(report.intact());
        assert_eq!(m2.fingerprint(percept::PREFIX), m1.fingerprint(percept::PREFIX));
        let fresh: Model<f32> = Model::new(&cfg, data.header.flow_norm, data.header.action_norm).unwrap();
        for p in STAGE2_PREFIXES {
            assert_ne!(m2.fingerprint(p), fresh.fingerprint(p), "{p} did not train");
        }
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let cfg = LampConfig::tiny();
        let data = tiny_data(&cfg);
        let mut other = cfg.clone();
        other.data.grid.rows = 2;
        assert!(matches!(train_stage1(&other, &data), Err(LampError::Config(_))));
    }
}
