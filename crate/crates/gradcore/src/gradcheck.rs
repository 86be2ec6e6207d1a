//! Central finite-difference verification of tape gradients.
//!
//! The error for one coordinate is `|analytic - numeric| / max(1, |analytic|, |numeric|)`:
//! relative for gradients of magnitude above one and absolute below, so
//! near-zero coordinates do not blow up the ratio.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn coord_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar(tape: &Tape<f64>, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::shape("grad_check", v.shape(), &[1]));
    }
    let x = v.item();
    if !x.is_finite() {
        return Err(Error::Numeric(format!("function value {x}")));
    }
    Ok(x)
}

/// Maximum coordinate error between the tape gradient of `f` at `x` and
/// central differences with the given `step`.
pub fn grad_check<G>(f: G, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    G: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    eval_scalar(&tape, out)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(xv).map(|g| g.into_data()).unwrap_or_else(|| vec![0.0; x.numel()]);

    let probe = |x: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::no_grad();
        let v = t.leaf(x, false);
        let o = f(&mut t, v)?;
        eval_scalar(&t, o)
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (probe(plus)? - probe(minus)?) / (2.0 * step);
        worst = worst.max(coord_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Same check over parameters of a store. At most `per_param` coordinates
/// of each parameter are probed (chosen with `rng`); `None` probes all.
pub fn grad_check_params<G>(store: &ParamStore<f64>, f: G, step: f64, per_param: Option<usize>, rng: &mut Rng) -> Result<f64>
where
    G: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let out = f(&mut tape, &work)?;
    eval_scalar(&tape, out)?;
    let grads = tape.backward(out)?;
    work.absorb_grads(&tape, &grads);
    let analytic: Vec<Option<Tensor<f64>>> = work.iter().map(|(_, p)| p.grad.clone()).collect();

    let mut worst = 0.0f64;
    let ids: Vec<_> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).value.numel();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => (0..k).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = work.get(id).value.data()[i];
            let mut eval_at = |v: f64| -> Result<f64> {
                work.get_mut(id).value.data_mut()[i] = v;
                let mut t = Tape::no_grad();
                let o = f(&mut t, &work)?;
                eval_scalar(&t, o)
            };
            let fp = eval_at(orig + step)?;
            let fm = eval_at(orig - step)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[id.index()].as_ref().map(|g| g.data()[i]).unwrap_or(0.0);
            worst = worst.max(coord_error(a, numeric));
        }
    }
    Ok(worst)
}
