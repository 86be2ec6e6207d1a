//! Building blocks shared by the networks.

use gradcore::{LayerNorm, Linear, MultiHeadAttention, ParamStore, Real, Result, Rng, Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// Two-layer GELU feed-forward network.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize, hidden: usize, out: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out, true, rng)?,
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// Pre-LN self-attention encoder block.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize, heads: usize, mlp_ratio: usize, rng: &mut Rng) -> Result<Self> {
        Ok(EncoderBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim, rng)?,
        })
    }

    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, store, x)?;
        let a = self.attn.forward(tape, store, h, h)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, store, x)?;
        let f = self.mlp.forward(tape, store, h)?;
        tape.add(x, f)
    }
}

/// `x * (1 + scale) + shift`, with `scale` and `shift` already shaped like `x`.
pub fn modulate<F: Real>(tape: &mut Tape<F>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let one = tape.constant(gradcore::Tensor::scalar(F::one()));
    let s = tape.add(scale, one)?;
    let y = tape.mul(x, s)?;
    tape.add(y, shift)
}

/// Row-wise constant tensor `[B, dim]` of sinusoidal flow-time embeddings.
pub fn time_embedding<F: Real>(tape: &mut Tape<F>, taus: &[f64], dim: usize) -> Var {
    tape.constant(gradcore::sinusoidal_embedding(taus, dim))
}
