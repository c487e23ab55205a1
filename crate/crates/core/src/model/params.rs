use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::math;

/// Rounds to the nearest float32 value so that checkpoints stored as f32 are lossless.
#[inline]
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named tensors kept in declaration order. The order defines checkpoint
/// layout, hashing and optimizer state alignment.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor { name: name.into(), shape, data: data.into_iter().map(round_f32).collect() });
        self.tensors.len() - 1
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    #[inline]
    pub fn data(&self, id: usize) -> &[f64] {
        &self.tensors[id].data
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Flat copy of every scalar in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Replaces all values from a flat list; the length must match exactly.
    pub fn load_flat(&mut self, values: &[f64]) -> bool {
        if values.len() != self.num_scalars() {
            return false;
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&values[off..off + n]);
            off += n;
        }
        true
    }

    pub(crate) fn data_mut(&mut self, id: usize) -> &mut [f64] {
        &mut self.tensors[id].data
    }

    /// SHA-256 over names, shapes and float32 little-endian values.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update((t.name.len() as u64).to_le_bytes());
            h.update(t.name.as_bytes());
            h.update((t.shape.len() as u64).to_le_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update((*v as f32).to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Global L2 norm of a gradient set.
pub fn grad_norm(grads: &[Vec<f64>]) -> f64 {
    math::sqrt(grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum())
}

/// Adaptive first-order optimizer without a momentum term (RMSProp with bias
/// correction) and global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Rmsprop {
    pub lr: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    second: Vec<Vec<f64>>,
    steps: u32,
}

impl Rmsprop {
    pub fn new(store: &ParamStore, lr: f64, clip_norm: f64) -> Self {
        Self { lr, beta2: 0.999, eps: 1e-8, clip_norm, second: store.zeros_like(), steps: 0 }
    }

    /// Applies one update in place and returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> f64 {
        let norm = grad_norm(grads);
        let clip = if self.clip_norm > 0.0 && norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        self.steps += 1;
        let correction = 1.0 - math::powi(self.beta2, self.steps);
        for (id, g) in grads.iter().enumerate() {
            let v = &mut self.second[id];
            let p = store.data_mut(id);
            for j in 0..g.len() {
                let gj = g[j] * clip;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let vhat = v[j] / correction;
                p[j] = round_f32(p[j] - self.lr * gj / (math::sqrt(vhat) + self.eps));
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_changes_with_values() {
        let mut s = ParamStore::new();
        let id = s.add("w", vec![2], vec![1.0, 2.0]);
        let h0 = s.hash();
        assert_eq!(h0, s.clone().hash());
        s.data_mut(id)[0] = 1.5;
        assert_ne!(h0, s.hash());
    }

    #[test]
    fn values_are_float32_representable() {
        let mut s = ParamStore::new();
        s.add("w", vec![1], vec![0.1]);
        assert_eq!(s.data(0)[0], 0.1f32 as f64);
    }

    #[test]
    fn rmsprop_moves_against_gradient_and_clips() {
        let mut s = ParamStore::new();
        s.add("w", vec![2], vec![1.0, -1.0]);
        let mut opt = Rmsprop::new(&s, 0.01, 1.0);
        let norm = opt.step(&mut s, &[vec![30.0, -40.0]]);
        assert_eq!(norm, 50.0);
        // first bias-corrected step moves each coordinate by ~lr
        assert!((s.data(0)[0] - 0.99).abs() < 1e-6);
        assert!((s.data(0)[1] + 0.99).abs() < 1e-6);
    }
}
