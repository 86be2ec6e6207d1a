//! Action Expert: a small transformer that denoises normalized action
//! chunks. Token 0 carries the robot state and the motion flow time t₁;
//! tokens 1..=H are the noisy actions. Every token receives the action
//! flow-time embedding, self-attends, and cross-attends to the guided
//! context features.

use gradcore::{LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, Real, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{LampError, Result};
use crate::flowmatch::{euler_integrate, flow_matching_loss, FlowTime, SolverSchedule};
use crate::layers::{time_embedding, Mlp};
use crate::motion_expert::EvalCounter;
use crate::toyworld::dataset::{ActionNormalizer, ACTION_DIM};

pub const PREFIX: &str = "action.";
pub const STATE_DIM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionExpertConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub mlp_ratio: usize,
    /// Chunk horizon H.
    pub horizon: usize,
}

impl Default for ActionExpertConfig {
    fn default() -> Self {
        ActionExpertConfig {
            width: 64,
            layers: 2,
            heads: 4,
            time_dim: 32,
            mlp_ratio: 2,
            horizon: 4,
        }
    }
}

impl ActionExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 || self.horizon == 0 {
            return Err(LampError::config(format!(
                "action width {} must be a positive multiple of {} heads and horizon positive",
                self.width, self.heads
            )));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(LampError::config("action time_dim must be even and positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CrossBlock {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct ActionExpert {
    pub cfg: ActionExpertConfig,
    pub context_dim: usize,
    pub state_embed: Linear,
    pub action_embed: Linear,
    pub pos: ParamId,
    pub time_embed: Linear,
    pub blocks: Vec<CrossBlock>,
    pub ln_f: LayerNorm,
    pub output: Linear,
    pub evals: EvalCounter,
}

impl ActionExpert {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: ActionExpertConfig, context_dim: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let name = |s: &str| format!("{PREFIX}{s}");
        let state_embed = Linear::new(store, &name("state_embed"), STATE_DIM + cfg.time_dim, d, true, rng)?;
        let action_embed = Linear::new(store, &name("action_embed"), ACTION_DIM, d, true, rng)?;
        let pos = store.add_normal(name("pos"), &[cfg.horizon, d], 0.02, rng)?;
        let time_embed = Linear::new(store, &name("time_embed"), cfg.time_dim, d, true, rng)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let b = format!("{PREFIX}block{i}");
            blocks.push(CrossBlock {
                ln1: LayerNorm::new(store, &format!("{b}.ln1"), d)?,
                self_attn: MultiHeadAttention::new(store, &format!("{b}.self_attn"), d, d, cfg.heads, rng)?,
                ln2: LayerNorm::new(store, &format!("{b}.ln2"), d)?,
                cross_attn: MultiHeadAttention::new(store, &format!("{b}.cross_attn"), d, context_dim, cfg.heads, rng)?,
                ln3: LayerNorm::new(store, &format!("{b}.ln3"), d)?,
                mlp: Mlp::new(store, &format!("{b}.mlp"), d, d * cfg.mlp_ratio, d, rng)?,
            });
        }
        let ln_f = LayerNorm::new(store, &name("ln_f"), d)?;
        let output = Linear::with_std(store, &name("output"), d, ACTION_DIM, true, 0.0, rng)?;
        Ok(ActionExpert {
            cfg,
            context_dim,
            state_embed,
            action_embed,
            pos,
            time_embed,
            blocks,
            ln_f,
            output,
            evals: EvalCounter::default(),
        })
    }

    /// Velocity `[B, H, 4]` for noisy chunks `a: [B, H, 4]`.
    /// `state: [B, 4]`, `z_guided: [B, L_z, d_z]`, one τ and one t₁ per row.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        a: Var,
        taus: &[f64],
        z_guided: Var,
        state: Var,
        t1: &[f64],
    ) -> Result<Var> {
        let (h, d) = (self.cfg.horizon, self.cfg.width);
        let ash = tape.shape(a).to_vec();
        if ash.len() != 3 || ash[1] != h || ash[2] != ACTION_DIM {
            return Err(LampError::Contract(format!("action chunk {ash:?}, expected [B, {h}, {ACTION_DIM}]")));
        }
        let b = ash[0];
        let zs = tape.shape(z_guided).to_vec();
        if zs.len() != 3 || zs[0] != b || zs[2] != self.context_dim {
            return Err(LampError::Contract(format!(
                "context {zs:?} does not match batch {b} and width {}",
                self.context_dim
            )));
        }
        if tape.shape(state) != [b, STATE_DIM] || taus.len() != b || t1.len() != b {
            return Err(LampError::Contract(format!(
                "state {:?}, {} flow times and {} motion times for batch {b}",
                tape.shape(state),
                taus.len(),
                t1.len()
            )));
        }
        self.evals.bump(b);

        let t1e = time_embedding(tape, t1, self.cfg.time_dim);
        let s = tape.concat(&[state, t1e], 1)?;
        let s = self.state_embed.forward(tape, store, s)?;
        let s = tape.reshape(s, &[b, 1, d])?;
        let x = self.action_embed.forward(tape, store, a)?;
        let pos = tape.param(store, self.pos);
        let x = tape.add(x, pos)?;
        let x = tape.concat(&[s, x], 1)?;
        let te = time_embedding(tape, taus, self.cfg.time_dim);
        let te = self.time_embed.forward(tape, store, te)?;
        let te = tape.expand(te, 1, h + 1)?;
        let mut x = tape.add(x, te)?;
        for blk in &self.blocks {
            let n = blk.ln1.forward(tape, store, x)?;
            let y = blk.self_attn.forward(tape, store, n, n)?;
            x = tape.add(x, y)?;
            let n = blk.ln2.forward(tape, store, x)?;
            let y = blk.cross_attn.forward(tape, store, n, z_guided)?;
            x = tape.add(x, y)?;
            let n = blk.ln3.forward(tape, store, x)?;
            let y = blk.mlp.forward(tape, store, n)?;
            x = tape.add(x, y)?;
        }
        let x = self.ln_f.forward(tape, store, x)?;
        let x = tape.narrow(x, 1, 1, h)?;
        Ok(self.output.forward(tape, store, x)?)
    }

    /// Flow-matching loss of this expert on `data` against `noise`.
    #[allow(clippy::too_many_arguments)]
    pub fn action_loss<F: Real>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        data: &Tensor<F>,
        noise: &Tensor<F>,
        taus: &[f64],
        z_guided: Var,
        state: Var,
        t1: &[f64],
    ) -> Result<Var> {
        let xt = crate::flowmatch::interpolate_rows(noise, data, taus)?;
        let xt = tape.constant(xt);
        let pred = self.forward(tape, store, xt, taus, z_guided, state, t1)?;
        flow_matching_loss(tape, pred, data, noise, None)
    }

    pub fn sample_noise<F: Real>(&self, batch: usize, rng: &mut Rng) -> Tensor<F> {
        Tensor::randn(&[batch, self.cfg.horizon, ACTION_DIM], 1.0, rng)
    }

    /// Euler integration from `noise`; returns normalized chunks `[B, H, 4]`.
    pub fn sample_normalized<F: Real>(
        &self,
        store: &ParamStore<F>,
        z_guided: &Tensor<F>,
        state: &Tensor<F>,
        t1: f64,
        schedule: &SolverSchedule,
        noise: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        let b = noise.shape()[0];
        let t1s = vec![t1; b];
        let field = |x: &Tensor<F>, t: FlowTime, _: &()| -> Result<Tensor<F>> {
            let mut tape = Tape::no_grad();
            let xv = tape.constant(x.clone());
            let zv = tape.constant(z_guided.clone());
            let sv = tape.constant(state.clone());
            let v = self.forward(&mut tape, store, xv, &vec![t.tau(); b], zv, sv, &t1s)?;
            Ok(tape.value(v).clone())
        };
        euler_integrate(field, noise, schedule, &())
    }

    /// Sampled chunks in action units, one `Vec<[f64; 4]>` of length H per row.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_chunk<F: Real>(
        &self,
        store: &ParamStore<F>,
        z_guided: &Tensor<F>,
        state: &Tensor<F>,
        t1: f64,
        schedule: &SolverSchedule,
        noise: &Tensor<F>,
        norm: &ActionNormalizer,
    ) -> Result<Vec<Vec<[f64; 4]>>> {
        let out = self.sample_normalized(store, z_guided, state, t1, schedule, noise)?;
        Ok(chunks_from_tensor(&out, norm))
    }
}

/// Denormalizes `[B, H, 4]` into per-row action lists.
pub fn chunks_from_tensor<F: Real>(t: &Tensor<F>, norm: &ActionNormalizer) -> Vec<Vec<[f64; 4]>> {
    let b = t.shape()[0];
    let per = t.numel() / b.max(1);
    (0..b)
        .map(|i| {
            let row: Vec<f64> = t.data()[i * per..(i + 1) * per].iter().map(|x| x.f64()).collect();
            norm.denormalize(&row).chunks(ACTION_DIM).map(|c| [c[0], c[1], c[2], c[3]]).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ParamStore<f64>, ActionExpert) {
        let mut store = ParamStore::new();
        let cfg = ActionExpertConfig {
            width: 16,
            layers: 1,
            heads: 2,
            time_dim: 8,
            mlp_ratio: 2,
            horizon: 3,
        };
        let e = ActionExpert::new(&mut store, cfg, 12, &mut Rng::new(0)).unwrap();
        (store, e)
    }

    #[test]
    fn zero_head_gives_noise_back() {
        let (store, e) = small();
        let mut rng = Rng::new(1);
        let z = Tensor::randn(&[2, 5, 12], 1.0, &mut rng);
        let s = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let noise: Tensor<f64> = e.sample_noise(2, &mut rng);
        let norm = ActionNormalizer {
            mean: [0.1, 0.2, 0.3, 0.4],
            std: [1.0, 2.0, 3.0, 4.0],
        };
        e.evals.reset();
        let out = e.sample_chunk(&store, &z, &s, 0.1, &SolverSchedule::default(), &noise, &norm).unwrap();
        assert_eq!(e.evals.get(), 2 * 10);
        assert_eq!(out, chunks_from_tensor(&noise, &norm));
        assert_eq!(out[0].len(), 3);
    }

    #[test]
    fn sampling_is_deterministic() {
        let (mut store, e) = small();
        let mut rng = Rng::new(9);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.get(id).value.shape().to_vec();
            store.get_mut(id).value = Tensor::randn(&shape, 0.3, &mut rng);
        }
        let z = Tensor::randn(&[1, 5, 12], 1.0, &mut rng);
        let s = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let run = || {
            let noise: Tensor<f64> = e.sample_noise(1, &mut Rng::new(77));
            e.sample_chunk(&store, &z, &s, 0.1, &SolverSchedule::default(), &noise, &ActionNormalizer::identity())
                .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn oracle_velocity_has_zero_loss() {
        let mut rng = Rng::new(3);
        let data: Tensor<f64> = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let noise = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let target = crate::flowmatch::velocity_target(&noise, &data).unwrap();
        let pred = tape.constant(target);
        let loss = flow_matching_loss(&mut tape, pred, &data, &noise, None).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn rejects_wrong_context_width() {
        let (store, e) = small();
        let mut tape = Tape::no_grad();
        let a = tape.constant(Tensor::<f64>::zeros(&[1, 3, 4]));
        let z = tape.constant(Tensor::zeros(&[1, 5, 11]));
        let s = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(e.forward(&mut tape, &store, a, &[0.5], z, s, &[0.1]).is_err());
    }
}
