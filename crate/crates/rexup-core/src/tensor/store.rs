//! Named parameter tensors with gradients and Adam state.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::{Error, Result, Scalar};

#[derive(Debug)]
pub(crate) struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

impl ParamEntry {
    fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        ParamEntry {
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        }
    }
}

/// Ordered map of named parameter tensors. Every entry carries a value,
/// a gradient accumulator, and Adam first/second moments of one shape.
#[derive(Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
    step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
            step_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub(crate) fn set_step_count(&mut self, steps: u64) {
        self.step_count = steps;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name.to_string(), ParamEntry::new(value));
        Ok(())
    }

    /// Xavier-style uniform init for a `[rows, cols]` weight matrix,
    /// seeded by `(seed, name)` so layouts are reproducible regardless of
    /// registration order.
    pub fn insert_xavier(&mut self, name: &str, rows: usize, cols: usize, seed: u64) -> Result<()> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let mut rng = seeded_rng(seed, name);
        let data: Vec<Scalar> = (0..rows * cols)
            .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * limit) as Scalar)
            .collect();
        self.insert(name, Tensor::from_vec(&[rows, cols], data)?)
    }

    /// Xavier init for a weight vector (fan-out 1).
    pub fn insert_xavier_vec(&mut self, name: &str, n: usize, seed: u64) -> Result<()> {
        let limit = (6.0 / (n + 1) as f64).sqrt();
        let mut rng = seeded_rng(seed, name);
        let data: Vec<Scalar> = (0..n)
            .map(|_| ((rng.random::<f64>() * 2.0 - 1.0) * limit) as Scalar)
            .collect();
        self.insert(name, Tensor::vector(data))
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], v: Scalar) -> Result<()> {
        self.insert(name, Tensor::filled(shape, v))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if entry.grad.shape() != g.shape() {
            return Err(Error::dimension(
                "accumulate_grad",
                format!(
                    "{name}: gradient {:?} vs parameter {:?}",
                    g.shape(),
                    entry.grad.shape()
                ),
            ));
        }
        for (a, &v) in entry.grad.data_mut().iter_mut().zip(g.data()) {
            *a += v;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Zero one entry's gradient (used to freeze it).
    pub fn zero_grad_entry(&mut self, name: &str) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        entry.grad.data_mut().fill(0.0);
        Ok(())
    }

    pub fn scale_grads(&mut self, c: Scalar) {
        for e in self.entries.values_mut() {
            for g in e.grad.data_mut() {
                *g *= c;
            }
        }
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> Scalar {
        let sq: Scalar = self
            .entries
            .values()
            .map(|e| e.grad.data().iter().map(|g| g * g).sum::<Scalar>())
            .sum();
        sq.sqrt()
    }

    /// Scale gradients down so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: Scalar) {
        let norm = self.grad_norm();
        if norm > max_norm {
            self.scale_grads(max_norm / norm);
        }
    }

    /// One bias-corrected Adam update over every entry. Gradients are
    /// zeroed afterward.
    pub fn adam_step(&mut self, lr: Scalar, beta1: Scalar, beta2: Scalar, eps: Scalar) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for e in self.entries.values_mut() {
            for i in 0..e.value.len() {
                let g = e.grad.data()[i];
                let m = beta1 * e.m.data()[i] + (1.0 - beta1) * g;
                let v = beta2 * e.v.data()[i] + (1.0 - beta2) * g * g;
                e.m.data_mut()[i] = m;
                e.v.data_mut()[i] = v;
                let mhat = m / bc1;
                let vhat = v / bc2;
                e.value.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Deep copy of values only (fresh grads and moments).
    pub fn snapshot_values(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, e) in &self.entries {
            out.entries
                .insert(name.clone(), ParamEntry::new(e.value.clone()));
        }
        out.step_count = self.step_count;
        out
    }

    pub(crate) fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), &e.value))
    }
}

/// Default Adam hyperparameters; the learning rate default is 0.0003.
pub mod adam_defaults {
    use crate::Scalar;
    pub const LEARNING_RATE: Scalar = 0.0003;
    pub const BETA1: Scalar = 0.9;
    pub const BETA2: Scalar = 0.999;
    pub const EPSILON: Scalar = 1e-8;
}

fn seeded_rng(seed: u64, name: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::adam_defaults::*;
    use super::*;

    #[test]
    fn default_learning_rate() {
        assert_eq!(LEARNING_RATE, 0.0003);
    }

    #[test]
    fn zero_gradients_are_a_fixed_point() {
        let mut store = ParamStore::new();
        store.insert_xavier("w", 3, 2, 7).unwrap();
        let before = store.value("w").unwrap().clone();
        store.adam_step(LEARNING_RATE, BETA1, BETA2, EPSILON);
        assert_eq!(store.value("w").unwrap(), &before);
        assert_eq!(store.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // first step, scalar g = 0.1: bias-corrected m̂ = g, v̂ = g²,
        // so the update is ≈ lr · sign(g).
        let mut store = ParamStore::new();
        store.insert_const("x", &[1], 1.0).unwrap();
        store
            .accumulate_grad("x", &Tensor::scalar(0.1))
            .unwrap();
        store.adam_step(0.0003, 0.9, 0.999, 1e-8);
        let updated = store.value("x").unwrap().item();
        let delta: Scalar = 1.0 - updated;
        assert!((delta - 0.0003).abs() < 1e-7, "delta = {delta}");
    }

    #[test]
    fn grads_zeroed_after_step() {
        let mut store = ParamStore::new();
        store.insert_const("x", &[2], 1.0).unwrap();
        store
            .accumulate_grad("x", &Tensor::vector(vec![0.5, -0.5]))
            .unwrap();
        store.adam_step(0.001, 0.9, 0.999, 1e-8);
        assert!(store.grad("x").unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn xavier_init_is_name_seeded_and_reproducible() {
        let mut a = ParamStore::new();
        a.insert_xavier("w1", 4, 4, 42).unwrap();
        a.insert_xavier("w2", 4, 4, 42).unwrap();
        let mut b = ParamStore::new();
        // registration order differs; values must not
        b.insert_xavier("w2", 4, 4, 42).unwrap();
        b.insert_xavier("w1", 4, 4, 42).unwrap();
        assert_eq!(a.value("w1").unwrap(), b.value("w1").unwrap());
        assert_eq!(a.value("w2").unwrap(), b.value("w2").unwrap());
        assert_ne!(a.value("w1").unwrap(), a.value("w2").unwrap());
    }

    #[test]
    fn clip_grad_norm_caps_global_norm() {
        let mut store = ParamStore::new();
        store.insert_zeros("a", &[2]).unwrap();
        store
            .accumulate_grad("a", &Tensor::vector(vec![30.0, 40.0]))
            .unwrap();
        store.clip_grad_norm(8.0);
        assert!((store.grad_norm() - 8.0).abs() < 1e-9);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut store = ParamStore::new();
        store.insert_zeros("a", &[1]).unwrap();
        assert!(store.insert_zeros("a", &[1]).is_err());
    }
}
