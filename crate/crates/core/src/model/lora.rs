use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::net::Denoiser;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::math;

/// Low-rank updates `scale·(x·A)·B` for every adaptable linear map of a base
/// denoiser. `A` is `d×r` with a random init, `B` is `r×k` and starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapters {
    pub rank: usize,
    pub scale: f64,
    pub base_fingerprint: [u8; 32],
    store: ParamStore,
    pub(crate) pairs: Vec<(usize, usize)>,
}

impl LoraAdapters {
    pub fn new(model: &Denoiser, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        Self::check_rank(model, rank)?;
        if !scale.is_finite() {
            return Err(Error::param("LoRA scale must be finite"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut pairs = Vec::new();
        for (name, d, k) in model.lora_targets() {
            let std = 1.0 / math::sqrt(*d as f64);
            let a: Vec<f64> = (0..d * rank)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            let ia = store.add(format!("{name}.lora_a"), vec![*d, rank], a);
            let ib = store.add(format!("{name}.lora_b"), vec![rank, *k], vec![0.0; rank * k]);
            pairs.push((ia, ib));
        }
        Ok(Self { rank, scale, base_fingerprint: model.config().fingerprint(), store, pairs })
    }

    /// Rebuilds adapters from flat values in declaration order.
    pub fn from_flat(model: &Denoiser, rank: usize, scale: f64, values: &[f64]) -> Result<Self> {
        let mut out = Self::new(model, rank, scale, 0)?;
        if !out.store.load_flat(values) {
            return Err(Error::Compatibility(format!(
                "expected {} adapter values, found {}",
                out.store.num_scalars(),
                values.len()
            )));
        }
        Ok(out)
    }

    /// `r ≥ 1` and `r ≤ min(d, k) / 4` for every adapted map.
    pub fn check_rank(model: &Denoiser, rank: usize) -> Result<()> {
        if rank == 0 {
            return Err(Error::param("LoRA rank must be at least 1"));
        }
        for (name, d, k) in model.lora_targets() {
            if 4 * rank > (*d).min(*k) {
                return Err(Error::param(format!(
                    "LoRA rank {rank} too large for {name} ({d}x{k}); at most {}",
                    (*d).min(*k) / 4
                )));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub(crate) fn pair(&self, slot: usize) -> (&[f64], &[f64]) {
        let (a, b) = self.pairs[slot];
        (self.store.data(a), self.store.data(b))
    }

    /// True while every `B` matrix is still exactly zero.
    pub fn is_identity(&self) -> bool {
        self.pairs.iter().all(|(_, b)| self.store.data(*b).iter().all(|v| *v == 0.0))
    }
}
