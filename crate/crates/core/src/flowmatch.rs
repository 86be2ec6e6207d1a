//! Conditional flow matching on the linear interpolant
//! `x^τ = (1 − τ)·noise + τ·data` with velocity target `data − noise`,
//! and the explicit Euler sampler on the uniform grid `τ_n = n / N`.

use gradcore::{Real, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{LampError, Result};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct FlowTime(f64);

impl FlowTime {
    pub const ZERO: FlowTime = FlowTime(0.0);
    pub const ONE: FlowTime = FlowTime(1.0);

    pub fn new(tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(LampError::config(format!("flow time {tau} outside [0, 1]")));
        }
        Ok(FlowTime(tau))
    }

    pub fn tau(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverSchedule {
    pub steps: usize,
}

impl SolverSchedule {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(LampError::config("solver needs at least one step"));
        }
        Ok(SolverSchedule { steps })
    }

    /// `τ_n = n / N` for `n = 0..=N`.
    pub fn grid(&self) -> Vec<f64> {
        (0..=self.steps).map(|n| self.tau(n)).collect()
    }

    pub fn tau(&self, n: usize) -> f64 {
        n as f64 / self.steps as f64
    }

    /// The flow time reached after one step, `t₁ = 1/N`.
    pub fn first_step(&self) -> FlowTime {
        FlowTime(self.tau(1))
    }
}

impl Default for SolverSchedule {
    fn default() -> Self {
        SolverSchedule { steps: 10 }
    }
}

/// Beta(alpha, beta) flow-time distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowTimeSampler {
    pub alpha: f64,
    pub beta: f64,
}

impl FlowTimeSampler {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(LampError::config(format!("Beta({alpha}, {beta}) needs positive parameters")));
        }
        Ok(FlowTimeSampler { alpha, beta })
    }

    pub fn uniform() -> Self {
        FlowTimeSampler { alpha: 1.0, beta: 1.0 }
    }

    pub fn action_default() -> Self {
        FlowTimeSampler { alpha: 1.5, beta: 1.0 }
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    /// Closed-form inverse CDF, available when one parameter is 1.
    pub fn inverse_cdf(&self, u: f64) -> Option<f64> {
        if self.beta == 1.0 {
            Some(u.powf(1.0 / self.alpha))
        } else if self.alpha == 1.0 {
            Some(1.0 - (1.0 - u).powf(1.0 / self.beta))
        } else {
            None
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> FlowTime {
        let x = match self.inverse_cdf(rng.uniform()) {
            Some(x) => x,
            None => {
                let a = gamma(self.alpha, rng);
                let b = gamma(self.beta, rng);
                a / (a + b)
            }
        };
        // Open interval: endpoints are pure noise or pure data.
        let lo = f64::EPSILON;
        FlowTime(x.clamp(lo, 1.0 - lo))
    }
}

/// Marsaglia–Tsang gamma variate with unit scale.
fn gamma(shape: f64, rng: &mut Rng) -> f64 {
    if shape < 1.0 {
        let g = gamma(shape + 1.0, rng);
        return g * rng.uniform().powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.normal();
        let v = (1.0 + c * x).powi(3);
        if v <= 0.0 {
            continue;
        }
        let u = rng.uniform();
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return d * v;
        }
    }
}

fn check_same(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(LampError::Contract(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

pub fn interpolate<F: Real>(noise: &Tensor<F>, data: &Tensor<F>, t: FlowTime) -> Result<Tensor<F>> {
    check_same("interpolate", noise.shape(), data.shape())?;
    let (a, b) = (F::of(1.0 - t.0), F::of(t.0));
    let out = noise.data().iter().zip(data.data()).map(|(&n, &d)| a * n + b * d).collect();
    Ok(Tensor::new(noise.shape(), out)?)
}

/// Per-row interpolation: row `i` of the leading axis uses `taus[i]`.
pub fn interpolate_rows<F: Real>(noise: &Tensor<F>, data: &Tensor<F>, taus: &[f64]) -> Result<Tensor<F>> {
    check_same("interpolate", noise.shape(), data.shape())?;
    let rows = noise.shape()[0];
    if taus.len() != rows {
        return Err(LampError::Contract(format!("{} flow times for {rows} rows", taus.len())));
    }
    let per = noise.numel() / rows;
    let mut out = Vec::with_capacity(noise.numel());
    for (i, &tau) in taus.iter().enumerate() {
        let (a, b) = (F::of(1.0 - tau), F::of(tau));
        let r = i * per..(i + 1) * per;
        out.extend(noise.data()[r.clone()].iter().zip(&data.data()[r]).map(|(&n, &d)| a * n + b * d));
    }
    Ok(Tensor::new(noise.shape(), out)?)
}

/// Differentiable interpolant on a tape.
pub fn interpolate_var<F: Real>(tape: &mut Tape<F>, noise: Var, data: Var, t: FlowTime) -> Result<Var> {
    check_same("interpolate", tape.shape(noise), tape.shape(data))?;
    let a = tape.scale(noise, 1.0 - t.0);
    let b = tape.scale(data, t.0);
    Ok(tape.add(a, b)?)
}

pub fn velocity_target<F: Real>(noise: &Tensor<F>, data: &Tensor<F>) -> Result<Tensor<F>> {
    check_same("velocity_target", noise.shape(), data.shape())?;
    let out = data.data().iter().zip(noise.data()).map(|(&d, &n)| d - n).collect();
    Ok(Tensor::new(noise.shape(), out)?)
}

/// Mean squared error between `pred` and `data − noise`, optionally
/// weighted per element (normalized by the total weight).
pub fn flow_matching_loss<F: Real>(
    tape: &mut Tape<F>,
    pred: Var,
    data: &Tensor<F>,
    noise: &Tensor<F>,
    weights: Option<&[f64]>,
) -> Result<Var> {
    check_same("flow_matching_loss", tape.shape(pred), data.shape())?;
    let target = tape.constant(velocity_target(noise, data)?);
    Ok(match weights {
        Some(w) => tape.weighted_mse(pred, target, w)?,
        None => tape.mse(pred, target)?,
    })
}

/// Convenience wrapper: builds the interpolant, calls `model`, returns the
/// loss. `model` receives the interpolant and per-row flow times.
pub fn flow_matching_objective<F: Real, M>(
    tape: &mut Tape<F>,
    model: M,
    data: &Tensor<F>,
    noise: &Tensor<F>,
    taus: &[f64],
    weights: Option<&[f64]>,
) -> Result<Var>
where
    M: FnOnce(&mut Tape<F>, Var, &[f64]) -> Result<Var>,
{
    let xt = interpolate_rows(noise, data, taus)?;
    let xt = tape.constant(xt);
    let pred = model(tape, xt, taus)?;
    flow_matching_loss(tape, pred, data, noise, weights)
}

/// Euler integration from τ = 0 to τ = 1 in `schedule.steps` evaluations.
pub fn euler_integrate<F, C, V>(field: V, x0: &Tensor<F>, schedule: &SolverSchedule, condition: &C) -> Result<Tensor<F>>
where
    F: Real,
    C: ?Sized,
    V: FnMut(&Tensor<F>, FlowTime, &C) -> Result<Tensor<F>>,
{
    partial_denoise(field, x0, schedule, schedule.steps, condition)
}

/// The Euler recursion truncated after `steps_taken` evaluations.
pub fn partial_denoise<F, C, V>(
    mut field: V,
    x0: &Tensor<F>,
    schedule: &SolverSchedule,
    steps_taken: usize,
    condition: &C,
) -> Result<Tensor<F>>
where
    F: Real,
    C: ?Sized,
    V: FnMut(&Tensor<F>, FlowTime, &C) -> Result<Tensor<F>>,
{
    if steps_taken == 0 || steps_taken > schedule.steps {
        return Err(LampError::config(format!(
            "steps_taken {steps_taken} outside 1..={}",
            schedule.steps
        )));
    }
    let mut x = x0.clone();
    for n in 0..steps_taken {
        let tau = schedule.tau(n);
        let v = field(&x, FlowTime(tau), condition)?;
        check_same("euler_integrate", v.shape(), x.shape())?;
        if !v.all_finite() {
            return Err(LampError::Numeric {
                step: n,
                what: "velocity field".into(),
            });
        }
        let dt = F::of(schedule.tau(n + 1) - tau);
        for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_linearity() {
        let mut rng = Rng::new(1);
        let n = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let d = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(interpolate(&n, &d, FlowTime::ZERO).unwrap(), n);
        assert_eq!(interpolate(&n, &d, FlowTime::ONE).unwrap(), d);
        let z = Tensor::zeros(&[3, 4]);
        let x = interpolate(&z, &d, FlowTime::new(0.3).unwrap()).unwrap();
        for (a, b) in x.data().iter().zip(d.data()) {
            assert_eq!(*a, 0.3 * b);
        }
    }

    #[test]
    fn velocity_target_examples() {
        let mut rng = Rng::new(2);
        let n = Tensor::<f64>::randn(&[5], 1.0, &mut rng);
        assert!(velocity_target(&n, &n).unwrap().data().iter().all(|&v| v == 0.0));
        let z = Tensor::zeros(&[5]);
        assert_eq!(velocity_target(&z, &n).unwrap(), n);
        let v = velocity_target(&n, &z).unwrap();
        let one_step = interpolate(&n, &z, FlowTime::ZERO).unwrap();
        for ((a, b), c) in one_step.data().iter().zip(v.data()).zip(z.data()) {
            assert_eq!(a + b, *c);
        }
    }

    #[test]
    fn loss_examples() {
        let data = Tensor::<f64>::ones(&[4]);
        let noise = Tensor::zeros(&[4]);
        let mut t = Tape::new();
        let zero = t.constant(Tensor::zeros(&[4]));
        let l = flow_matching_loss(&mut t, zero, &data, &noise, None).unwrap();
        assert_eq!(t.value(l).item(), 1.0);
        let oracle = t.constant(velocity_target(&noise, &data).unwrap());
        let l = flow_matching_loss(&mut t, oracle, &data, &noise, None).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        let bad = t.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(flow_matching_loss(&mut t, bad, &data, &noise, None), Err(LampError::Contract(_))));
    }

    #[test]
    fn sampler_closed_forms() {
        let s = FlowTimeSampler::action_default();
        assert_eq!(s.inverse_cdf(0.125), Some(0.25));
        let u = FlowTimeSampler::uniform();
        let mut a = Rng::new(9);
        let mut b = Rng::new(9);
        assert_eq!(u.sample(&mut a).tau(), b.uniform());
    }

    #[test]
    fn general_beta_mean() {
        let s = FlowTimeSampler::new(2.0, 3.0).unwrap();
        let mut rng = Rng::new(4);
        let n = 50_000;
        let m = (0..n).map(|_| s.sample(&mut rng).tau()).sum::<f64>() / n as f64;
        assert!((m - 0.4).abs() < 0.01, "{m}");
    }

    #[test]
    fn constant_field_and_call_count() {
        let x0 = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let c = Tensor::<f64>::from_f64(&[3], &[0.3, 0.1, -1.0]).unwrap();
        let sched = SolverSchedule::default();
        let mut calls = 0;
        let field = |_: &Tensor<f64>, _: FlowTime, c: &Tensor<f64>| {
            calls += 1;
            Ok(c.clone())
        };
        let x1 = partial_denoise(field, &x0, &sched, 1, &c).unwrap();
        assert_eq!(calls, 1);
        for i in 0..3 {
            assert!((x1.data()[i] - (x0.data()[i] + 0.1 * c.data()[i])).abs() < 1e-15);
        }
        let full = euler_integrate(|_: &Tensor<f64>, _, c: &Tensor<f64>| Ok(c.clone()), &x0, &sched, &c).unwrap();
        for i in 0..3 {
            assert!((full.data()[i] - (x0.data()[i] + c.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_field_reports_step() {
        let x0 = Tensor::<f64>::zeros(&[2]);
        let sched = SolverSchedule::new(4).unwrap();
        let mut n = 0;
        let field = |x: &Tensor<f64>, _: FlowTime, _: &()| {
            n += 1;
            Ok(if n == 3 { x.map(|_| f64::NAN) } else { x.clone() })
        };
        match euler_integrate(field, &x0, &sched, &()) {
            Err(LampError::Numeric { step: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schedule_grid() {
        let s = SolverSchedule::new(4).unwrap();
        assert_eq!(s.grid(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(SolverSchedule::new(0).is_err());
        assert_eq!(SolverSchedule::default().first_step().tau(), 0.1);
    }
}
