//! Fusion of motion hidden states into the context features.
//!
//! `Gated` is the method: `z + σ(g)·CA(Q = LN(z), K = V = LN(W_proj z_m))`
//! with one scalar gate `g`. `Add` and `ConcatMlp` are ablations and
//! `None` passes `z` through untouched. Only the active mode's parameters
//! are registered.

use std::fmt;
use std::str::FromStr;

use gradcore::{LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, Real, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{LampError, Result};
use crate::layers::Mlp;

pub const PREFIX: &str = "guidance.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    Gated,
    Add,
    ConcatMlp,
    None,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 4] = [GuidanceMode::Gated, GuidanceMode::Add, GuidanceMode::ConcatMlp, GuidanceMode::None];

    pub fn name(self) -> &'static str {
        match self {
            GuidanceMode::Gated => "gated",
            GuidanceMode::Add => "add",
            GuidanceMode::ConcatMlp => "concat_mlp",
            GuidanceMode::None => "none",
        }
    }

    /// Whether the Motion Expert runs at all in this mode.
    pub fn uses_motion(self) -> bool {
        self != GuidanceMode::None
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GuidanceMode {
    type Err = LampError;

    fn from_str(s: &str) -> Result<Self> {
        GuidanceMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| LampError::config(format!("unknown guidance mode '{s}' (gated, add, concat_mlp, none)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub heads: usize,
    /// Initial gate logit; σ(0) = 0.5, σ(−4) ≈ 0.018.
    pub gate_init: f64,
    /// Hidden width of the concat_mlp variant, as a multiple of d_z.
    pub mlp_ratio: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            mode: GuidanceMode::Gated,
            heads: 4,
            gate_init: 0.0,
            mlp_ratio: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub enum GuidanceParams {
    Gated {
        proj: Linear,
        ln_motion: LayerNorm,
        ln_query: LayerNorm,
        attn: MultiHeadAttention,
        gate: ParamId,
    },
    Add {
        proj: Linear,
    },
    ConcatMlp {
        mlp: Mlp,
    },
    None,
}

#[derive(Debug, Clone)]
pub struct GuidanceModule {
    pub cfg: GuidanceConfig,
    pub context_dim: usize,
    pub motion_dim: usize,
    pub params: GuidanceParams,
}

impl GuidanceModule {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: GuidanceConfig, context_dim: usize, motion_dim: usize, rng: &mut Rng) -> Result<Self> {
        let name = |s: &str| format!("{PREFIX}{s}");
        let params = match cfg.mode {
            GuidanceMode::Gated => {
                if cfg.heads == 0 || context_dim % cfg.heads != 0 {
                    return Err(LampError::config(format!("guidance heads {} must divide d_z = {context_dim}", cfg.heads)));
                }
                GuidanceParams::Gated {
                    proj: Linear::new(store, &name("proj"), motion_dim, context_dim, true, rng)?,
                    ln_motion: LayerNorm::new(store, &name("ln_motion"), context_dim)?,
                    ln_query: LayerNorm::new(store, &name("ln_query"), context_dim)?,
                    attn: MultiHeadAttention::new(store, &name("attn"), context_dim, context_dim, cfg.heads, rng)?,
                    gate: store.add(name("gate"), Tensor::scalar(F::of(cfg.gate_init)).reshaped(&[1])?)?,
                }
            }
            GuidanceMode::Add => GuidanceParams::Add {
                proj: Linear::new(store, &name("proj"), motion_dim, context_dim, true, rng)?,
            },
            GuidanceMode::ConcatMlp => GuidanceParams::ConcatMlp {
                mlp: Mlp::new(
                    store,
                    &name("mlp"),
                    context_dim + motion_dim,
                    context_dim * cfg.mlp_ratio,
                    context_dim,
                    rng,
                )?,
            },
            GuidanceMode::None => GuidanceParams::None,
        };
        Ok(GuidanceModule {
            cfg,
            context_dim,
            motion_dim,
            params,
        })
    }

    pub fn mode(&self) -> GuidanceMode {
        self.cfg.mode
    }

    pub fn gate(&self) -> Option<ParamId> {
        match self.params {
            GuidanceParams::Gated { gate, .. } => Some(gate),
            _ => None,
        }
    }

    fn check(&self, tape: &Tape<impl Real>, z: Var, z_m: Option<Var>) -> Result<()> {
        let zs = tape.shape(z);
        if zs.len() != 3 || zs[2] != self.context_dim {
            return Err(LampError::Contract(format!("context {zs:?}, expected width {}", self.context_dim)));
        }
        if let Some(m) = z_m {
            let ms = tape.shape(m);
            if ms.len() != 3 || ms[0] != zs[0] || ms[2] != self.motion_dim {
                return Err(LampError::Contract(format!(
                    "motion hidden {ms:?} does not match batch {} and width {}",
                    zs[0], self.motion_dim
                )));
            }
        }
        Ok(())
    }

    /// Ungated cross-attention term `CA(LN(z), LN(W_proj z_m))` of the gated mode.
    pub fn cross_attention<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, z: Var, z_m: Var) -> Result<Var> {
        let GuidanceParams::Gated {
            proj,
            ln_motion,
            ln_query,
            attn,
            ..
        } = &self.params
        else {
            return Err(LampError::Contract(format!("cross_attention needs gated mode, have {}", self.mode())));
        };
        self.check(tape, z, Some(z_m))?;
        let m = proj.forward(tape, store, z_m)?;
        let m = ln_motion.forward(tape, store, m)?;
        let q = ln_query.forward(tape, store, z)?;
        Ok(attn.forward(tape, store, q, m)?)
    }

    /// Guided context features, same shape as `z`. `z_m` may be `None` only in mode none.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, z: Var, z_m: Option<Var>) -> Result<Var> {
        self.check(tape, z, z_m)?;
        let need = |m: Option<Var>| m.ok_or_else(|| LampError::Contract(format!("mode {} needs motion hidden states", self.mode())));
        match &self.params {
            GuidanceParams::Gated { gate, .. } => {
                let ca = self.cross_attention(tape, store, z, need(z_m)?)?;
                let g = tape.param(store, *gate);
                let g = tape.sigmoid(g);
                let ca = tape.mul(ca, g)?;
                Ok(tape.add(z, ca)?)
            }
            GuidanceParams::Add { proj } => {
                let lz = tape.shape(z)[1];
                let pooled = tape.mean_axis(need(z_m)?, 1)?;
                let p = proj.forward(tape, store, pooled)?;
                let p = tape.expand(p, 1, lz)?;
                Ok(tape.add(z, p)?)
            }
            GuidanceParams::ConcatMlp { mlp } => {
                let lz = tape.shape(z)[1];
                let pooled = tape.mean_axis(need(z_m)?, 1)?;
                let pooled = tape.expand(pooled, 1, lz)?;
                let x = tape.concat(&[z, pooled], 2)?;
                Ok(mlp.forward(tape, store, x)?)
            }
            GuidanceParams::None => Ok(z),
        }
    }

    pub fn forward_tensor<F: Real>(&self, store: &ParamStore<F>, z: &Tensor<F>, z_m: Option<&Tensor<F>>) -> Result<Tensor<F>> {
        let mut tape = Tape::no_grad();
        let zv = tape.constant(z.clone());
        let mv = z_m.map(|m| tape.constant(m.clone()));
        let out = self.forward(&mut tape, store, zv, mv)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(mode: GuidanceMode, gate_init: f64) -> (ParamStore<f64>, GuidanceModule) {
        let mut store = ParamStore::new();
        let cfg = GuidanceConfig {
            mode,
            gate_init,
            ..GuidanceConfig::default()
        };
        let m = GuidanceModule::new(&mut store, cfg, 16, 12, &mut Rng::new(5)).unwrap();
        (store, m)
    }

    fn inputs(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = Rng::new(seed);
        (
            Tensor::rand_uniform(&[2, 5, 16], -10.0, 10.0, &mut rng),
            Tensor::rand_uniform(&[2, 8, 12], -10.0, 10.0, &mut rng),
        )
    }

    #[test]
    fn closed_gate_is_identity() {
        let (store, g) = build(GuidanceMode::Gated, -30.0);
        let (z, m) = inputs(1);
        let out = g.forward_tensor(&store, &z, Some(&m)).unwrap();
        assert!(out.max_abs_diff(&z) <= 1e-8);
    }

    #[test]
    fn zero_gate_adds_half_attention() {
        let (store, g) = build(GuidanceMode::Gated, 0.0);
        let (z, m) = inputs(2);
        let mut tape = Tape::no_grad();
        let (zv, mv) = (tape.constant(z.clone()), tape.constant(m.clone()));
        let ca = g.cross_attention(&mut tape, &store, zv, mv).unwrap();
        let ca = tape.value(ca).clone();
        let out = g.forward_tensor(&store, &z, Some(&m)).unwrap();
        for ((o, zi), c) in out.data().iter().zip(z.data()).zip(ca.data()) {
            assert_eq!(*o, zi + 0.5 * c);
        }
    }

    #[test]
    fn single_gate_parameter() {
        let (store, _) = build(GuidanceMode::Gated, 0.0);
        assert_eq!(store.count_with_prefix("guidance.gate"), 1);
        assert_eq!(store.numel_with_prefix("guidance.gate"), 1);
        let (store, _) = build(GuidanceMode::None, 0.0);
        assert_eq!(store.count_with_prefix(PREFIX), 0);
    }

    #[test]
    fn add_with_zero_motion_and_bias_is_identity() {
        let (store, g) = build(GuidanceMode::Add, 0.0);
        let (z, _) = inputs(3);
        let m = Tensor::zeros(&[2, 8, 12]);
        let out = g.forward_tensor(&store, &z, Some(&m)).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn add_differs_from_gated() {
        let (sa, a) = build(GuidanceMode::Add, 0.0);
        let (sg, g) = build(GuidanceMode::Gated, 0.0);
        let (z, m) = inputs(4);
        let oa = a.forward_tensor(&sa, &z, Some(&m)).unwrap();
        let og = g.forward_tensor(&sg, &z, Some(&m)).unwrap();
        assert_eq!(oa.shape(), z.shape());
        assert!(oa.max_abs_diff(&og) > 1e-3);
    }

    #[test]
    fn concat_mlp_zero_weights_give_zero() {
        let (mut store, g) = build(GuidanceMode::ConcatMlp, 0.0);
        let ids: Vec<_> = store.ids_with_prefix(PREFIX).collect();
        for id in ids {
            store.get_mut(id).value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let (z, m) = inputs(5);
        let out = g.forward_tensor(&store, &z, Some(&m)).unwrap();
        assert_eq!(out.shape(), z.shape());
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn none_is_bit_identical() {
        let (store, g) = build(GuidanceMode::None, 0.0);
        let (z, _) = inputs(6);
        assert_eq!(g.forward_tensor(&store, &z, None).unwrap(), z);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in GuidanceMode::ALL {
            assert_eq!(m.name().parse::<GuidanceMode>().unwrap(), m);
        }
        assert!("mystery".parse::<GuidanceMode>().is_err());
    }
}
