//! A reusable finite-difference sweep over every differentiable primitive.
//! Each entry reports the worst coordinate error across its seeds.

use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_params};
use crate::nn::{Linear, MultiHeadAttention};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub seeds: u64,
    pub max_error: f64,
}

/// Random linear functional so the scalar output depends on every element.
pub fn project(t: &mut Tape<f64>, y: Var, rng: &mut Rng) -> Result<Var> {
    let w = Tensor::randn(t.shape(y), 1.0, rng);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type UnaryOp = fn(&mut Tape<f64>, Var, &mut Rng) -> Result<Var>;

fn unary_ops() -> Vec<(&'static str, Vec<usize>, UnaryOp)> {
    vec![
        ("add-broadcast", vec![3, 4], |t, x, r| {
            let b = t.constant(Tensor::randn(&[4], 1.0, r));
            t.add(x, b)
        }),
        ("sub", vec![3, 4], |t, x, r| {
            let b = t.constant(Tensor::randn(&[3, 4], 1.0, r));
            t.sub(b, x)
        }),
        ("mul", vec![2, 5], |t, x, _| t.mul(x, x)),
        ("mul-broadcast-operand", vec![4], |t, x, r| {
            let a = t.constant(Tensor::randn(&[3, 4], 1.0, r));
            t.mul(a, x)
        }),
        ("scalar-gate", vec![1], |t, x, r| {
            let a = t.constant(Tensor::randn(&[2, 3], 1.0, r));
            let s = t.sigmoid(x);
            t.mul(a, s)
        }),
        ("sigmoid", vec![3, 4], |t, x, _| Ok(t.sigmoid(x))),
        ("gelu", vec![3, 4], |t, x, _| Ok(t.gelu(x))),
        ("silu", vec![3, 4], |t, x, _| Ok(t.silu(x))),
        ("tanh", vec![3, 4], |t, x, _| Ok(t.tanh(x))),
        ("scale", vec![5], |t, x, _| Ok(t.scale(x, -1.7))),
        ("softmax", vec![3, 4], |t, x, _| t.softmax(x)),
        ("layer_norm", vec![2, 8], |t, x, r| {
            let s = t.constant(Tensor::randn(&[8], 1.0, r));
            let b = t.constant(Tensor::randn(&[8], 1.0, r));
            t.layer_norm(x, Some(s), Some(b), 1e-5)
        }),
        ("layer_norm-scale", vec![6], |t, s, r| {
            let x = t.constant(Tensor::randn(&[3, 6], 1.0, r));
            t.layer_norm(x, Some(s), None, 1e-5)
        }),
        ("mse", vec![2, 3], |t, x, r| {
            let target = t.constant(Tensor::randn(&[2, 3], 1.0, r));
            t.mse(x, target)
        }),
        ("weighted_mse", vec![6], |t, x, r| {
            let target = t.constant(Tensor::randn(&[6], 1.0, r));
            let w: Vec<f64> = (0..6).map(|_| r.below(2) as f64).collect();
            t.weighted_mse(x, target, &w)
        }),
        ("concat", vec![2, 3], |t, x, r| {
            let other = t.constant(Tensor::randn(&[2, 2], 1.0, r));
            t.concat(&[other, x, x], 1)
        }),
        ("reshape", vec![2, 6], |t, x, _| {
            let y = t.reshape(x, &[3, 4])?;
            t.mul(y, y)
        }),
        ("transpose", vec![2, 3, 4], |t, x, _| {
            let y = t.transpose(x)?;
            t.mul(y, y)
        }),
        ("matmul", vec![4, 5], |t, x, r| {
            let b = t.constant(Tensor::randn(&[5, 3], 1.0, r));
            t.matmul(x, b)
        }),
        ("matmul-right", vec![5, 3], |t, x, r| {
            let a = t.constant(Tensor::randn(&[4, 5], 1.0, r));
            t.matmul(a, x)
        }),
        ("embedding", vec![5, 3], |t, table, _| t.embedding(table, &[4, 0, 4, 2])),
        ("mean_axis", vec![2, 3, 4], |t, x, _| t.mean_axis(x, 1)),
        ("narrow", vec![2, 3, 4], |t, x, _| t.narrow(x, 2, 1, 2)),
        ("expand", vec![2, 4], |t, x, _| {
            let e = t.expand(x, 1, 3)?;
            t.mul(e, e)
        }),
        ("mean", vec![3, 3], |t, x, _| {
            let sq = t.mul(x, x)?;
            Ok(t.mean(sq))
        }),
        ("attention-query", vec![2, 3, 8], |t, q, r| {
            let k = t.constant(Tensor::randn(&[2, 4, 8], 1.0, r));
            let v = t.constant(Tensor::randn(&[2, 4, 8], 1.0, r));
            t.attention(q, k, v, 2)
        }),
        ("attention-key", vec![2, 4, 8], |t, k, r| {
            let q = t.constant(Tensor::randn(&[2, 3, 8], 1.0, r));
            let v = t.constant(Tensor::randn(&[2, 4, 8], 1.0, r));
            t.attention(q, k, v, 2)
        }),
        ("attention-value", vec![2, 4, 8], |t, v, r| {
            let q = t.constant(Tensor::randn(&[2, 3, 8], 1.0, r));
            let k = t.constant(Tensor::randn(&[2, 4, 8], 1.0, r));
            t.attention(q, k, v, 2)
        }),
    ]
}

/// Checks every primitive plus `Linear` and `MultiHeadAttention` parameter
/// gradients over `seeds` seeds with central differences of size `step`.
pub fn primitive_suite(seeds: u64, step: f64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (i, (name, shape, op)) in unary_ops().into_iter().enumerate() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = Rng::new(((i as u64) << 32) | seed);
            let x = Tensor::randn(&shape, 1.0, &mut rng);
            let ps = rng.next_u64();
            let err = grad_check(
                |t, x| {
                    let mut r = Rng::new(ps);
                    let y = op(t, x, &mut r)?;
                    project(t, y, &mut r)
                },
                &x,
                step,
            )?;
            worst = worst.max(err);
        }
        out.push(CheckOutcome {
            name: name.to_string(),
            seeds,
            max_error: worst,
        });
    }

    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = Rng::new(0xA11 + seed);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "lin", 4, 6, true, &mut rng)?;
        let mha = MultiHeadAttention::new(&mut store, "mha", 6, 4, 3, &mut rng)?;
        store.randomize("", 0.5, &mut rng);
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let ps = rng.next_u64();
        let err = grad_check_params(
            &store,
            |t, s| {
                let xv = t.constant(x.clone());
                let q = lin.forward(t, s, xv)?;
                let q = t.gelu(q);
                let y = mha.forward(t, s, q, xv)?;
                project(t, y, &mut Rng::new(ps))
            },
            step,
            None,
            &mut rng,
        )?;
        worst = worst.max(err);
    }
    out.push(CheckOutcome {
        name: "linear+multi_head_attention".into(),
        seeds,
        max_error: worst,
    });
    Ok(out)
}
