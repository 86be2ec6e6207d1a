//! AdamW with decoupled weight decay, global-norm clipping and a
//! cosine-with-floor learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers and step counter for one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct OptimizerState<F> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Option<Vec<F>>>,
    second: Vec<Option<Vec<F>>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Moment buffers of parameter `index`, if it has been updated.
    pub fn moments(&self, index: usize) -> Option<(&[F], &[F])> {
        match (self.first.get(index)?, self.second.get(index)?) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }

    /// One AdamW update over every non-frozen parameter. Every such
    /// parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.frozen && p.grad.is_none()) {
            return Err(Error::Training(format!("parameter {} has no gradient", p.name)));
        }
        self.first.resize_with(store.len(), || None);
        self.second.resize_with(store.len(), || None);
        self.step += 1;
        let AdamWConfig {
            lr,
            betas: (b1, b2),
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1f, b2f) = (F::of(b1), F::of(b2));
        let (ob1, ob2) = (F::of(1.0 - b1), F::of(1.0 - b2));
        let decay = F::of(1.0 - lr * weight_decay);
        let (inv_bc1, inv_bc2) = (F::of(1.0 / bc1), F::of(1.0 / bc2));
        let (lr_f, eps_f) = (F::of(lr), F::of(eps));
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let g = p.grad.as_ref().expect("checked above").data().to_vec();
            let i = id.index();
            let m = self.first[i].get_or_insert_with(|| vec![F::zero(); g.len()]);
            let v = self.second[i].get_or_insert_with(|| vec![F::zero(); g.len()]);
            for (((w, &gj), mj), vj) in p.value.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = b1f * *mj + ob1 * gj;
                *vj = b2f * *vj + ob2 * gj * gj;
                let mhat = *mj * inv_bc1;
                let vhat = *vj * inv_bc2;
                *w = *w * decay - lr_f * mhat / (vhat.sqrt() + eps_f);
            }
        }
        Ok(())
    }
}

/// Rescales all non-frozen gradients so their global L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(store: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let total: f64 = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter().map(|x| x.f64() * x.f64()))
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let c = F::of(max_norm / total);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                for x in g.data_mut() {
                    *x *= c;
                }
            }
        }
    }
    total
}

/// Cosine decay from `base` at step 0 to `floor` at `total_steps`, no warm-up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub floor: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base;
        }
        let progress = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        self.floor + (self.base - self.floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(value)).unwrap();
        s.get_mut(id).grad = Some(Tensor::scalar(grad));
        s
    }

    #[test]
    fn zero_gradient_leaves_value() {
        let mut s = store_with(0.7, 0.0);
        let mut opt = OptimizerState::new(AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.item(), 0.7);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m = 0.05, v = 0.0125 after one step with g = 0.5; bias-corrected
        // m̂ = 0.5, v̂ = 0.25, so the update is -lr * 0.5 / (0.5 + eps).
        let mut s = store_with(1.0, 0.5);
        let mut opt = OptimizerState::new(AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut s).unwrap();
        let want = 1.0 - 1e-2 * 0.5 / (0.5 + 1e-8);
        let got = s.iter().next().unwrap().1.value.item();
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut s = store_with(0.3, 0.0);
        let frozen = s.add("f", Tensor::scalar(0.123456789)).unwrap();
        s.get_mut(frozen).frozen = true;
        s.get_mut(frozen).grad = Some(Tensor::scalar(5.0));
        let mut opt = OptimizerState::new(AdamWConfig::default());
        for _ in 0..10 {
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.get(frozen).value.item().to_bits(), 0.123456789f64.to_bits());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = ParamStore::<f64>::new();
        s.add_zeros("w", &[2]).unwrap();
        let mut opt = OptimizerState::new(AdamWConfig::default());
        assert!(matches!(opt.step(&mut s), Err(Error::Training(_))));
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut s = store_with(2.0, 0.0);
        let mut opt = OptimizerState::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        });
        opt.step(&mut s).unwrap();
        assert!((s.iter().next().unwrap().1.value.item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add_zeros("a", &[2]).unwrap();
        s.get_mut(a).grad = Some(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        let before = clip_grad_norm(&mut s, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        let g = s.get(a).grad.as_ref().unwrap().data().to_vec();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_shape() {
        let s = CosineSchedule {
            base: 2e-4,
            floor: 2e-5,
            total_steps: 100,
        };
        assert_eq!(s.lr(0), 2e-4);
        assert!((s.lr(100) - 2e-5).abs() < 1e-18);
        for i in 0..100 {
            assert!(s.lr(i + 1) <= s.lr(i));
        }
    }
}
