//! Parameterized layers built from tape primitives.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weight `[in × out]` drawn from N(0, 1/in); bias zero.
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        let std = 1.0 / (in_dim as f64).sqrt();
        Self::with_std(store, name, in_dim, out_dim, bias, std, rng)
    }

    pub fn with_std<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = if std == 0.0 {
            store.add_zeros(format!("{name}.weight"), &[in_dim, out_dim])?
        } else {
            store.add_normal(format!("{name}.weight"), &[in_dim, out_dim], std, rng)?
        };
        let bias = if bias {
            Some(store.add_zeros(format!("{name}.bias"), &[out_dim])?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            scale: store.add_ones(format!("{name}.scale"), &[dim])?,
            shift: store.add_zeros(format!("{name}.shift"), &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let s = tape.param(store, self.scale);
        let b = tape.param(store, self.shift);
        tape.layer_norm(x, Some(s), Some(b), self.eps)
    }
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize, kv_dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{name}: width {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
        })
    }

    /// `query: [B, Lq, d]` attends over `context: [B, Lk, kv_dim]`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, query: Var, context: Var) -> Result<Var> {
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, context)?;
        let v = self.v.forward(tape, store, context)?;
        let a = tape.attention(q, k, v, self.heads)?;
        self.o.forward(tape, store, a)
    }
}

/// Sinusoidal embedding of a scalar time in `[0, 1]`, width `dim` (even).
/// Frequencies are geometric from 1 to 1000, applied to `1000 * t`.
pub fn sinusoidal_embedding<F: Real>(times: &[f64], dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(times.len() * dim);
    for &t in times {
        let x = t * 1000.0;
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            data.push(F::of((x * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            data.push(F::of((x * freq).cos()));
        }
        if dim % 2 == 1 {
            data.push(F::zero());
        }
    }
    Tensor::new(&[times.len(), dim], data).expect("embedding shape")
}
