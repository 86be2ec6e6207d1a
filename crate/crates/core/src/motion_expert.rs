//! Motion Expert: a motion-token transformer with adaptive LayerNorm
//! conditioning that predicts flow-matching velocities over scene flow.
//!
//! The condition vector is `MLP(mean_pool(z) ⊕ sinusoid(τ))`. Each block
//! maps it to (shift, scale, gate) for the self-attention and MLP sublayers
//! and also cross-attends from motion tokens to the layer-normed perception
//! tokens, which keeps where things are in the image. Before the blocks,
//! every motion token also receives a projection of the perception patch
//! under its centre. Modulation and output projections start at zero, so a
//! fresh expert emits zero velocity.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use gradcore::{LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, Real, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{LampError, Result};
use crate::flowmatch::{euler_integrate, FlowTime, SolverSchedule};
use crate::layers::{modulate, time_embedding, Mlp, LN_EPS};
use crate::motionrep::{denormalize, unpatchify, GridSpec, MotionNormalizer, MotionTokens, SceneFlowField, PATCH, TOKEN_DIM};

pub const PREFIX: &str = "motion.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionExpertConfig {
    /// Hidden width d_m.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Width of the sinusoidal flow-time embedding.
    pub time_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for MotionExpertConfig {
    fn default() -> Self {
        MotionExpertConfig {
            width: 64,
            layers: 4,
            heads: 4,
            time_dim: 32,
            mlp_ratio: 2,
        }
    }
}

impl MotionExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.layers == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(LampError::config(format!(
                "motion width {} must be a positive multiple of {} heads with at least one layer",
                self.width, self.heads
            )));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(LampError::config("motion time_dim must be even and positive"));
        }
        Ok(())
    }
}

/// Shared count of per-sample velocity evaluations; a batched forward
/// pass over B samples counts B.
#[derive(Debug, Clone, Default)]
pub struct EvalCounter(Arc<AtomicUsize>);

impl EvalCounter {
    pub fn bump(&self, samples: usize) {
        self.0.fetch_add(samples, Ordering::Relaxed);
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone)]
pub struct AdaBlock {
    pub modulation: Linear,
    pub attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross: MultiHeadAttention,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct MotionExpert {
    pub cfg: MotionExpertConfig,
    pub grid: GridSpec,
    pub cond_dim: usize,
    pub input: Linear,
    pub time_pos: ParamId,
    pub space_pos: ParamId,
    pub cond1: Linear,
    pub cond2: Linear,
    pub cond_norm: LayerNorm,
    /// Projects the perception patch under each motion token.
    pub local: Linear,
    pub blocks: Vec<AdaBlock>,
    pub final_modulation: Linear,
    pub output: Linear,
    pub evals: EvalCounter,
}

/// Velocity and the final block's hidden tokens, both batched.
pub struct MotionForward {
    pub velocity: Var,
    pub hidden: Var,
}

impl MotionExpert {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: MotionExpertConfig, grid: GridSpec, cond_dim: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        grid.validate()?;
        let d = cfg.width;
        let name = |s: &str| format!("{PREFIX}{s}");
        let input = Linear::new(store, &name("input"), TOKEN_DIM, d, true, rng)?;
        let time_pos = store.add_normal(name("time_pos"), &[grid.horizon, d], 0.02, rng)?;
        let space_pos = store.add_normal(name("space_pos"), &[grid.tokens_per_step(), d], 0.02, rng)?;
        let cond1 = Linear::new(store, &name("cond1"), cond_dim + cfg.time_dim, d, true, rng)?;
        let cond2 = Linear::new(store, &name("cond2"), d, d, true, rng)?;
        let cond_norm = LayerNorm::new(store, &name("cond_norm"), cond_dim)?;
        let local = Linear::new(store, &name("local"), cond_dim, d, true, rng)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let b = format!("{PREFIX}block{i}");
            blocks.push(AdaBlock {
                modulation: Linear::with_std(store, &format!("{b}.modulation"), d, 6 * d, true, 0.0, rng)?,
                attn: MultiHeadAttention::new(store, &format!("{b}.attn"), d, d, cfg.heads, rng)?,
                ln_cross: LayerNorm::new(store, &format!("{b}.ln_cross"), d)?,
                cross: MultiHeadAttention::new(store, &format!("{b}.cross"), d, cond_dim, cfg.heads, rng)?,
                mlp: Mlp::new(store, &format!("{b}.mlp"), d, d * cfg.mlp_ratio, d, rng)?,
            });
        }
        let final_modulation = Linear::with_std(store, &name("final_modulation"), d, 2 * d, true, 0.0, rng)?;
        let output = Linear::with_std(store, &name("output"), d, TOKEN_DIM, true, 0.0, rng)?;
        Ok(MotionExpert {
            cfg,
            grid,
            cond_dim,
            input,
            time_pos,
            space_pos,
            cond1,
            cond2,
            cond_norm,
            local,
            blocks,
            final_modulation,
            output,
            evals: EvalCounter::default(),
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.num_tokens()
    }

    /// One batched velocity evaluation. `x: [B, L_m, 12]`, `z: [B, L_z, d_z]`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var, taus: &[f64], z: Var) -> Result<MotionForward> {
        let (l, d) = (self.num_tokens(), self.cfg.width);
        let xs = tape.shape(x).to_vec();
        let zs = tape.shape(z).to_vec();
        if xs.len() != 3 || xs[1] != l || xs[2] != TOKEN_DIM {
            return Err(LampError::Contract(format!("motion tokens {xs:?}, expected [B, {l}, {TOKEN_DIM}]")));
        }
        let b = xs[0];
        if zs.len() != 3 || zs[0] != b || zs[2] != self.cond_dim {
            return Err(LampError::Contract(format!(
                "condition {zs:?} does not match batch {b} and width {}",
                self.cond_dim
            )));
        }
        if taus.len() != b {
            return Err(LampError::Contract(format!("{} flow times for batch {b}", taus.len())));
        }
        self.evals.bump(b);

        let h = self.input.forward(tape, store, x)?;
        let tp = tape.param(store, self.time_pos);
        let tp = tape.expand(tp, 1, self.grid.tokens_per_step())?;
        let sp = tape.param(store, self.space_pos);
        let sp = tape.expand(sp, 0, self.grid.horizon)?;
        let pos = tape.add(tp, sp)?;
        let pos = tape.reshape(pos, &[l, d])?;
        let mut h = tape.add(h, pos)?;

        let pooled = tape.mean_axis(z, 1)?;
        let temb = time_embedding(tape, taus, self.cfg.time_dim);
        let c = tape.concat(&[pooled, temb], 1)?;
        let c = self.cond1.forward(tape, store, c)?;
        let c = tape.silu(c);
        let c = self.cond2.forward(tape, store, c)?;
        let c = tape.silu(c);
        let zn = self.cond_norm.forward(tape, store, z)?;

        // [B, L_z, d_z] -> patch under each spatial token -> [B, L_m, d]
        let sel = tape.constant(self.patch_selection(zs[1])?);
        let zt = tape.transpose(zn)?;
        let zl = tape.matmul_rows(zt, sel)?;
        let zl = tape.transpose(zl)?;
        let zl = self.local.forward(tape, store, zl)?;
        let zl = tape.expand(zl, 1, self.grid.horizon)?;
        let zl = tape.reshape(zl, &[b, l, d])?;
        h = tape.add(h, zl)?;

        for blk in &self.blocks {
            let m = blk.modulation.forward(tape, store, c)?;
            let mut parts = Vec::with_capacity(6);
            for i in 0..6 {
                let p = tape.narrow(m, 1, i * d, d)?;
                parts.push(tape.expand(p, 1, l)?);
            }
            let n = tape.layer_norm(h, None, None, LN_EPS)?;
            let n = modulate(tape, n, parts[0], parts[1])?;
            let a = blk.attn.forward(tape, store, n, n)?;
            let a = tape.mul(a, parts[2])?;
            h = tape.add(h, a)?;
            let n = blk.ln_cross.forward(tape, store, h)?;
            let a = blk.cross.forward(tape, store, n, zn)?;
            h = tape.add(h, a)?;
            let n = tape.layer_norm(h, None, None, LN_EPS)?;
            let n = modulate(tape, n, parts[3], parts[4])?;
            let f = blk.mlp.forward(tape, store, n)?;
            let f = tape.mul(f, parts[5])?;
            h = tape.add(h, f)?;
        }
        let hidden = h;
        let m = self.final_modulation.forward(tape, store, c)?;
        let shift = tape.narrow(m, 1, 0, d)?;
        let shift = tape.expand(shift, 1, l)?;
        let scale = tape.narrow(m, 1, d, d)?;
        let scale = tape.expand(scale, 1, l)?;
        let n = tape.layer_norm(h, None, None, LN_EPS)?;
        let n = modulate(tape, n, shift, scale)?;
        let velocity = self.output.forward(tape, store, n)?;
        Ok(MotionForward { velocity, hidden })
    }

    /// One-hot `[L_z, tokens_per_step]` picking, for each spatial motion
    /// token, the square image patch containing its centre. Token 0 of the
    /// context is not an image patch.
    fn patch_selection<F: Real>(&self, context: usize) -> Result<Tensor<F>> {
        let g = &self.grid;
        let (w, hgt) = (g.image_width as f64, g.image_height as f64);
        let patches = context.saturating_sub(1);
        let side = (w * hgt / patches.max(1) as f64).sqrt().round();
        let (px, py) = ((w / side).round() as usize, (hgt / side).round() as usize);
        if patches == 0 || px * py != patches {
            return Err(LampError::Contract(format!("{context} context tokens do not tile a {w}x{hgt} image")));
        }
        let (pcols, ls) = (g.cols / PATCH, g.tokens_per_step());
        let (cw, ch) = (w / g.cols as f64 * PATCH as f64, hgt / g.rows as f64 * PATCH as f64);
        let mut data = vec![F::zero(); context * ls];
        for s in 0..ls {
            let (x, y) = (((s % pcols) as f64 + 0.5) * cw, ((s / pcols) as f64 + 0.5) * ch);
            let (i, j) = (((x / side) as usize).min(px - 1), ((y / side) as usize).min(py - 1));
            data[(1 + j * px + i) * ls + s] = F::one();
        }
        Ok(Tensor::new(&[context, ls], data)?)
    }

    /// Velocity without a gradient tape, all rows at flow time `t`.
    pub fn velocity_tensor<F: Real>(&self, store: &ParamStore<F>, x: &Tensor<F>, t: FlowTime, z: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(x.clone());
        let zv = tape.constant(z.clone());
        let taus = vec![t.tau(); x.shape()[0]];
        let out = self.forward(&mut tape, store, xv, &taus, zv)?;
        Ok(tape.value(out.velocity).clone())
    }

    /// Standard-normal token noise `[B, L_m, 12]`.
    pub fn sample_noise<F: Real>(&self, batch: usize, rng: &mut Rng) -> Tensor<F> {
        Tensor::randn(&[batch, self.num_tokens(), TOKEN_DIM], 1.0, rng)
    }

    /// Full Euler rollout from `noise` to normalized motion tokens.
    pub fn generate_tokens<F: Real>(&self, store: &ParamStore<F>, z: &Tensor<F>, schedule: &SolverSchedule, noise: &Tensor<F>) -> Result<Tensor<F>> {
        euler_integrate(|x, t, z: &Tensor<F>| self.velocity_tensor(store, x, t, z), noise, schedule, z)
    }

    /// Full generation, unpatchified and denormalized, one field per batch row.
    pub fn generate_flow<F: Real>(
        &self,
        store: &ParamStore<F>,
        z: &Tensor<F>,
        schedule: &SolverSchedule,
        noise: &Tensor<F>,
        norm: &MotionNormalizer,
    ) -> Result<Vec<SceneFlowField>> {
        let tokens = self.generate_tokens(store, z, schedule, noise)?;
        tokens_to_fields(self.grid, &tokens, norm)
    }

    pub fn generate_flow_rng<F: Real>(
        &self,
        store: &ParamStore<F>,
        z: &Tensor<F>,
        schedule: &SolverSchedule,
        rng: &mut Rng,
        norm: &MotionNormalizer,
    ) -> Result<Vec<SceneFlowField>> {
        let noise = self.sample_noise(z.shape()[0], rng);
        self.generate_flow(store, z, schedule, &noise, norm)
    }

    /// Hidden tokens `[B, L_m, d_m]` from a single velocity evaluation at
    /// τ = 0 on `noise`. Runs without a gradient tape.
    pub fn one_step_hidden<F: Real>(&self, store: &ParamStore<F>, z: &Tensor<F>, noise: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::no_grad();
        let xv = tape.constant(noise.clone());
        let zv = tape.constant(z.clone());
        let taus = vec![0.0; noise.shape()[0]];
        let out = self.forward(&mut tape, store, xv, &taus, zv)?;
        let h = tape.value(out.hidden);
        if !h.all_finite() {
            return Err(LampError::Numeric {
                step: 0,
                what: "motion hidden state".into(),
            });
        }
        Ok(h.clone())
    }

    pub fn one_step_hidden_rng<F: Real>(&self, store: &ParamStore<F>, z: &Tensor<F>, rng: &mut Rng) -> Result<Tensor<F>> {
        let noise = self.sample_noise(z.shape()[0], rng);
        self.one_step_hidden(store, z, &noise)
    }
}

/// Splits `[B, L_m, 12]` normalized tokens into denormalized fields.
pub fn tokens_to_fields<F: Real>(grid: GridSpec, tokens: &Tensor<F>, norm: &MotionNormalizer) -> Result<Vec<SceneFlowField>> {
    let b = tokens.shape()[0];
    let per = tokens.numel() / b.max(1);
    (0..b)
        .map(|i| {
            let row = tokens.data()[i * per..(i + 1) * per].iter().map(|x| x.f64()).collect();
            let field = unpatchify(&MotionTokens::new(grid, row)?)?;
            denormalize(&field, norm)
        })
        .collect()
}

pub fn freeze<F: Real>(store: &mut ParamStore<F>) {
    store.freeze_prefix(PREFIX);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ParamStore<f64>, MotionExpert) {
        let mut store = ParamStore::new();
        let cfg = MotionExpertConfig {
            width: 16,
            layers: 2,
            heads: 2,
            time_dim: 8,
            mlp_ratio: 2,
        };
        let grid = GridSpec {
            rows: 4,
            cols: 4,
            horizon: 2,
            image_width: 32,
            image_height: 32,
        };
        let e = MotionExpert::new(&mut store, cfg, grid, 8, &mut Rng::new(1)).unwrap();
        (store, e)
    }

    #[test]
    fn zero_output_at_init_and_shapes() {
        let (store, e) = small();
        let mut rng = Rng::new(2);
        let x: Tensor<f64> = e.sample_noise(3, &mut rng);
        let z = Tensor::randn(&[3, 5, 8], 1.0, &mut rng);
        let v = e.velocity_tensor(&store, &x, FlowTime::new(0.3).unwrap(), &z).unwrap();
        assert_eq!(v.shape(), x.shape());
        assert!(v.data().iter().all(|&a| a == 0.0));
        let h = e.one_step_hidden(&store, &z, &x).unwrap();
        assert_eq!(h.shape(), &[3, 4 * 2, 16]);
    }

    #[test]
    fn zero_velocity_generation_returns_noise() {
        let (store, e) = small();
        let mut rng = Rng::new(3);
        let noise: Tensor<f64> = e.sample_noise(1, &mut rng);
        let z = Tensor::randn(&[1, 5, 8], 1.0, &mut rng);
        let norm = MotionNormalizer {
            mean: [0.5, -1.0, 0.25],
            std: [2.0, 3.0, 0.5],
        };
        e.evals.reset();
        let out = e.generate_flow(&store, &z, &SolverSchedule::default(), &noise, &norm).unwrap();
        assert_eq!(e.evals.get(), 10);
        let expect = tokens_to_fields(e.grid, &noise, &norm).unwrap();
        assert_eq!(out[0].values(), expect[0].values());
        e.evals.reset();
        e.one_step_hidden(&store, &z, &noise).unwrap();
        assert_eq!(e.evals.get(), 1);
    }

    #[test]
    fn each_token_reads_the_patch_under_it() {
        let (_, e) = small();
        // 2x2 spatial tokens over 16-pixel patches: token s reads context row 1 + s
        let sel: Tensor<f64> = e.patch_selection(5).unwrap();
        for row in 0..5 {
            for s in 0..4 {
                let want = if row == 1 + s { 1.0 } else { 0.0 };
                assert_eq!(sel.data()[row * 4 + s], want);
            }
        }
        assert!(e.patch_selection::<f64>(6).is_err());
        assert!(e.patch_selection::<f64>(1).is_err());
    }

    #[test]
    fn rejects_condition_width_mismatch() {
        let (store, e) = small();
        let mut rng = Rng::new(4);
        let x: Tensor<f64> = e.sample_noise(1, &mut rng);
        let z = Tensor::randn(&[1, 5, 7], 1.0, &mut rng);
        assert!(e.velocity_tensor(&store, &x, FlowTime::ZERO, &z).is_err());
    }
}
