//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Values are row-major [`Tensor`]s over `f32` or `f64`. A [`Tape`] records
//! one forward pass; [`Tape::backward`] returns per-node [`Gradients`], and
//! [`ParamStore::absorb_grads`] moves parameter gradients into the store for
//! [`OptimizerState::step`].
//!
//! Broadcasting is limited to a right operand that is a scalar or matches the
//! trailing axes of the left operand.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod real;
pub mod rng;
pub mod suite;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_params};
pub use nn::{sinusoidal_embedding, LayerNorm, Linear, MultiHeadAttention};
pub use optim::{clip_grad_norm, AdamWConfig, CosineSchedule, OptimizerState};
pub use params::{ParamId, ParamStore, Parameter};
pub use real::Real;
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
