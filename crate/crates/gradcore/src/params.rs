use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub frozen: bool,
    pub grad: Option<Tensor<F>>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            frozen: false,
            grad: None,
        });
        Ok(id)
    }

    pub fn add_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut Rng) -> Result<ParamId> {
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::ones(shape))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter().filter(move |(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id)
    }

    /// Number of scalar elements under `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.ids_with_prefix(prefix).map(|id| self.get(id).value.numel()).sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.ids_with_prefix(prefix).count()
    }

    /// Freezes every parameter whose name starts with `prefix` and drops its
    /// gradient buffer.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = true;
            p.grad = None;
        }
    }

    pub fn unfreeze_prefix(&mut self, prefix: &str) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = false;
        }
    }

    /// Redraws every value under `prefix` from N(0, std²), so zero-initialized
    /// layers get generic values for gradient checks.
    pub fn randomize(&mut self, prefix: &str, std: f64, rng: &mut Rng) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.value = Tensor::randn(p.value.shape(), std, rng);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients of every parameter leaf on `tape` into the
    /// parameters' gradient buffers. Frozen parameters are skipped.
    pub fn absorb_grads(&mut self, tape: &Tape<F>, grads: &Gradients<F>) {
        for (id, var) in tape.params() {
            let p = &mut self.params[id.0];
            if p.frozen {
                continue;
            }
            let Some(g) = grads.get_slice(var) else { continue };
            match &mut p.grad {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
                None => p.grad = Some(Tensor::new(p.value.shape(), g.to_vec()).expect("grad shape")),
            }
        }
    }

    /// FNV-1a digest of names, shapes and element bits under `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h = OFFSET;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            eat(p.name.as_bytes());
            for &e in p.value.shape() {
                eat(&(e as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                eat(&x.f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f64>::new();
        s.add_zeros("a", &[2]).unwrap();
        assert!(s.add_zeros("a", &[2]).is_err());
    }

    #[test]
    fn freeze_by_prefix() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add_zeros("motion.w", &[2]).unwrap();
        let b = s.add_zeros("action.w", &[2]).unwrap();
        s.freeze_prefix("motion.");
        assert!(s.get(a).frozen);
        assert!(!s.get(b).frozen);
        assert_eq!(s.count_with_prefix("motion."), 1);
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add_zeros("x", &[3]).unwrap();
        let before = s.fingerprint("");
        s.get_mut(a).value.data_mut()[1] = 1e-30;
        assert_ne!(before, s.fingerprint(""));
    }
}
