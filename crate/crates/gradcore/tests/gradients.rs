//! Finite-difference checks for every differentiable primitive, 64-bit,
//! central differences with step 1e-6, 20 seeds each.

use gradcore::{grad_check, grad_check_params, MultiHeadAttention, ParamStore, Result, Rng, Tape, Tensor, Var};

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;
const SEEDS: u64 = 20;

/// Random linear functional so the scalar output depends on every element.
fn project(t: &mut Tape<f64>, y: Var, rng: &mut Rng) -> Result<Var> {
    let w = Tensor::randn(t.shape(y), 1.0, rng);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn check_unary(name: &str, shape: &[usize], op: impl Fn(&mut Tape<f64>, Var, &mut Rng) -> Result<Var>) {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(1000 + seed);
        let x = Tensor::randn(shape, 1.0, &mut rng);
        let proj_seed = rng.next_u64();
        let err = grad_check(
            |t, x| {
                let mut r = Rng::new(proj_seed);
                let y = op(t, x, &mut r)?;
                project(t, y, &mut r)
            },
            &x,
            STEP,
        )
        .unwrap();
        assert!(err <= TOL, "{name} seed {seed}: rel err {err}");
    }
}

#[test]
fn matmul_both_operands() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(seed);
        let a = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let ps = rng.next_u64();
        let bc = b.clone();
        let err_a = grad_check(
            |t, a| {
                let b = t.constant(bc.clone());
                let y = t.matmul(a, b)?;
                project(t, y, &mut Rng::new(ps))
            },
            &a,
            STEP,
        )
        .unwrap();
        let ac = a.clone();
        let err_b = grad_check(
            |t, b| {
                let a = t.constant(ac.clone());
                let y = t.matmul(a, b)?;
                project(t, y, &mut Rng::new(ps))
            },
            &b,
            STEP,
        )
        .unwrap();
        assert!(err_a <= TOL && err_b <= TOL, "seed {seed}: {err_a} {err_b}");
    }
}

#[test]
fn elementwise_add_sub_mul_with_broadcast() {
    check_unary("add-bcast", &[3, 4], |t, x, r| {
        let b = t.constant(Tensor::randn(&[4], 1.0, r));
        t.add(x, b)
    });
    check_unary("sub", &[3, 4], |t, x, r| {
        let b = t.constant(Tensor::randn(&[3, 4], 1.0, r));
        t.sub(b, x)
    });
    check_unary("mul-self", &[2, 5], |t, x, _| t.mul(x, x));
    // gradient into the broadcast operand itself
    check_unary("mul-into-bias", &[4], |t, x, r| {
        let a = t.constant(Tensor::randn(&[3, 4], 1.0, r));
        t.mul(a, x)
    });
    check_unary("scalar-gate", &[1], |t, x, r| {
        let a = t.constant(Tensor::randn(&[2, 3], 1.0, r));
        let s = t.sigmoid(x);
        t.mul(a, s)
    });
}

#[test]
fn activations() {
    check_unary("sigmoid", &[3, 4], |t, x, _| Ok(t.sigmoid(x)));
    check_unary("gelu", &[3, 4], |t, x, _| Ok(t.gelu(x)));
    check_unary("silu", &[3, 4], |t, x, _| Ok(t.silu(x)));
    check_unary("tanh", &[3, 4], |t, x, _| Ok(t.tanh(x)));
    check_unary("scale", &[5], |t, x, _| Ok(t.scale(x, -1.7)));
}

#[test]
fn softmax_rows() {
    check_unary("softmax", &[3, 4], |t, x, _| t.softmax(x));
}

#[test]
fn layer_norm_input_and_affine() {
    check_unary("layer_norm", &[2, 8], |t, x, r| {
        let s = t.constant(Tensor::randn(&[8], 1.0, r));
        let b = t.constant(Tensor::randn(&[8], 1.0, r));
        t.layer_norm(x, Some(s), Some(b), 1e-5)
    });
    check_unary("layer_norm-plain", &[3, 6], |t, x, _| t.layer_norm(x, None, None, 1e-5));
    check_unary("layer_norm-scale", &[6], |t, s, r| {
        let x = t.constant(Tensor::randn(&[3, 6], 1.0, r));
        t.layer_norm(x, Some(s), None, 1e-5)
    });
}

#[test]
fn mse_and_weighted_mse() {
    check_unary("mse", &[2, 3], |t, x, r| {
        let target = t.constant(Tensor::randn(&[2, 3], 1.0, r));
        t.mse(x, target)
    });
    check_unary("weighted_mse", &[6], |t, x, r| {
        let target = t.constant(Tensor::randn(&[6], 1.0, r));
        let w: Vec<f64> = (0..6).map(|_| r.below(2) as f64).collect();
        t.weighted_mse(x, target, &w)
    });
}

#[test]
fn structural_ops() {
    check_unary("concat-axis1", &[2, 3], |t, x, r| {
        let other = t.constant(Tensor::randn(&[2, 2], 1.0, r));
        t.concat(&[other, x, x], 1)
    });
    check_unary("concat-axis0", &[2, 3], |t, x, r| {
        let other = t.constant(Tensor::randn(&[1, 3], 1.0, r));
        t.concat(&[x, other], 0)
    });
    check_unary("reshape", &[2, 6], |t, x, _| {
        let y = t.reshape(x, &[3, 4])?;
        t.mul(y, y)
    });
    check_unary("transpose", &[3, 4], |t, x, r| {
        let y = t.transpose(x)?;
        let w = t.constant(Tensor::randn(&[3, 2], 1.0, r));
        t.matmul(y, w)
    });
    check_unary("transpose-batched", &[2, 3, 4], |t, x, _| {
        let y = t.transpose(x)?;
        t.mul(y, y)
    });
    check_unary("embedding", &[5, 3], |t, table, _| t.embedding(table, &[4, 0, 4, 2]));
    check_unary("mean_axis", &[2, 3, 4], |t, x, _| t.mean_axis(x, 1));
    check_unary("narrow", &[2, 3, 4], |t, x, _| t.narrow(x, 2, 1, 2));
    check_unary("expand", &[2, 4], |t, x, _| {
        let e = t.expand(x, 1, 3)?;
        t.mul(e, e)
    });
    check_unary("mean", &[3, 3], |t, x, _| {
        let sq = t.mul(x, x)?;
        Ok(t.mean(sq))
    });
}

#[test]
fn linear_layer_params() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(50 + seed);
        let mut store = ParamStore::<f64>::new();
        let lin = gradcore::Linear::new(&mut store, "lin", 4, 3, true, &mut rng).unwrap();
        // Non-zero bias so its gradient path is exercised with generic values.
        let b = lin.bias.unwrap();
        store.get_mut(b).value = Tensor::randn(&[3], 0.5, &mut rng);
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let ps = rng.next_u64();
        let err = grad_check_params(
            &store,
            |t, s| {
                let xv = t.constant(x.clone());
                let y = lin.forward(t, s, xv)?;
                let y = t.gelu(y);
                project(t, y, &mut Rng::new(ps))
            },
            STEP,
            None,
            &mut rng,
        )
        .unwrap();
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn scaled_dot_product_attention_all_inputs() {
    for seed in 0..SEEDS {
        let mut rng = Rng::new(300 + seed);
        let q = Tensor::randn(&[2, 3, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[2, 4, 8], 1.0, &mut rng);
        let v = Tensor::randn(&[2, 4, 8], 1.0, &mut rng);
        let ps = rng.next_u64();
        let run = |which: usize, x: &Tensor<f64>| {
            grad_check(
                |t, var| {
                    let qv = if which == 0 { var } else { t.constant(q.clone()) };
                    let kv = if which == 1 { var } else { t.constant(k.clone()) };
                    let vv = if which == 2 { var } else { t.constant(v.clone()) };
                    let y = t.attention(qv, kv, vv, 2)?;
                    project(t, y, &mut Rng::new(ps))
                },
                x,
                STEP,
            )
            .unwrap()
        };
        for (which, x) in [(0, &q), (1, &k), (2, &v)] {
            let err = run(which, x);
            assert!(err <= TOL, "seed {seed} input {which}: {err}");
        }
    }
}

#[test]
fn multi_head_attention_full_check() {
    // 2 heads, Lq = 3, Lk = 4, d = 8; every projection weight and both inputs.
    for seed in 0..SEEDS {
        let mut rng = Rng::new(700 + seed);
        let mut store = ParamStore::<f64>::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 8, 8, 2, &mut rng).unwrap();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            if store.get(id).name.ends_with("bias") {
                store.get_mut(id).value = Tensor::randn(&[8], 0.3, &mut rng);
            }
        }
        let xq = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let xk = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let ps = rng.next_u64();
        let f = |t: &mut Tape<f64>, s: &ParamStore<f64>, q: Var, k: Var| -> Result<Var> {
            let y = mha.forward(t, s, q, k)?;
            project(t, y, &mut Rng::new(ps))
        };
        let err_p = grad_check_params(
            &store,
            |t, s| {
                let q = t.constant(xq.clone());
                let k = t.constant(xk.clone());
                f(t, s, q, k)
            },
            STEP,
            None,
            &mut rng,
        )
        .unwrap();
        let err_q = grad_check(
            |t, q| {
                let k = t.constant(xk.clone());
                f(t, &store, q, k)
            },
            &xq,
            STEP,
        )
        .unwrap();
        let err_k = grad_check(
            |t, k| {
                let q = t.constant(xq.clone());
                f(t, &store, q, k)
            },
            &xk,
            STEP,
        )
        .unwrap();
        assert!(err_p <= TOL && err_q <= TOL && err_k <= TOL, "seed {seed}: {err_p} {err_q} {err_k}");
    }
}

#[test]
fn reusable_suite_passes() {
    let outcomes = gradcore::suite::primitive_suite(SEEDS, STEP).unwrap();
    assert!(outcomes.len() > 25);
    for o in outcomes {
        assert!(o.max_error <= TOL, "{}: {}", o.name, o.max_error);
    }
}
