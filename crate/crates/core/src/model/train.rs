use alloc::boxed::Box;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::flow::{flow_path, target_velocity, FlowDraw, TrainingPair, VelocityModel};
use super::lora::LoraAdapters;
use super::net::Denoiser;
use super::params::Rmsprop;
use crate::error::{Checkpoint, Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub cond_dropout: f64,
    pub clip_norm: f64,
    /// Training stops with [`Error::Diverged`] once a batch loss exceeds this.
    pub divergence_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-4, batch_size: 4, steps: 0, seed: 0, cond_dropout: 0.1, clip_norm: 1.0, divergence_loss: 1e3 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::param("condition dropout must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Number of optimizer steps covering `epochs` passes over `dataset_len` items.
pub fn steps_for_epochs(dataset_len: usize, batch_size: usize, epochs: usize) -> usize {
    epochs * dataset_len.div_ceil(batch_size.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

struct Planned {
    index: usize,
    shift: usize,
    draw: FlowDraw,
}

/// Batch composition and random draws of one step. Items are visited in a
/// fresh permutation every epoch; each item gets its own random stream so the
/// plan does not depend on how the batch is later split across threads.
fn plan_step(cfg: &TrainConfig, step: usize, data: &[TrainingPair]) -> Vec<Planned> {
    let n = data.len();
    (0..cfg.batch_size)
        .map(|slot| {
            let flat = step * cfg.batch_size + slot;
            let (epoch, pos) = (flat / n, flat % n);
            let mut perm_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            perm_rng.set_stream(epoch as u64);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut perm_rng);
            let index = perm[pos];

            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851_F42D_4C95_7F2D);
            rng.set_stream(flat as u64);
            let shift = rng.random_range(0..1024);
            let draw = FlowDraw::draw(&mut rng, data[index].target.len(), cfg.cond_dropout);
            Planned { index, shift, draw }
        })
        .collect()
}

/// Loss of one item and the gradient of `loss / batch` w.r.t. either the base
/// parameters or the adapters.
fn item_gradient(
    model: &Denoiser,
    adapters: Option<&LoraAdapters>,
    pair: &TrainingPair,
    draw: &FlowDraw,
    batch: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let x_t = flow_path(&draw.x0, &pair.target, draw.t);
    let u = target_velocity(&draw.x0, &pair.target);
    let n = u.len() as f64;
    let mut loss = 0.0;
    let g_out = |pred: &[f64]| -> Vec<f64> {
        let mut g = Vec::with_capacity(pred.len());
        for (p, t) in pred.iter().zip(&u) {
            loss += (p - t) * (p - t) / n;
            g.push(2.0 * (p - t) / (n * batch as f64));
        }
        g
    };
    let grads = match adapters {
        Some(a) => {
            let mut g = a.params().zeros_like();
            model.forward_backward(Some((a, 1.0)), draw.t, &x_t, &pair.cond, draw.cond_drop, g_out, None, Some(&mut g))?;
            g
        }
        None => {
            let mut g = model.params().zeros_like();
            model.forward_backward(None, draw.t, &x_t, &pair.cond, draw.cond_drop, g_out, Some(&mut g), None)?;
            g
        }
    };
    Ok((loss, grads))
}

fn batch_gradient(
    model: &Denoiser,
    adapters: Option<&LoraAdapters>,
    data: &[TrainingPair],
    plan: &[Planned],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let results = par::map(plan.len(), |i| {
        let p = &plan[i];
        let pair = data[p.index].rotated(p.shift);
        item_gradient(model, adapters, &pair, &p.draw, plan.len())
    });
    let mut loss = 0.0;
    let mut total: Option<Vec<Vec<f64>>> = None;
    for r in results {
        let (l, g) = r?;
        loss += l;
        match total.as_mut() {
            None => total = Some(g),
            Some(t) => {
                for (a, b) in t.iter_mut().zip(&g) {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    Ok((loss / plan.len() as f64, total.unwrap_or_default()))
}

fn check_data(data: &[TrainingPair]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    Ok(())
}

fn diverged(cfg: &TrainConfig, step: usize, loss: f64, last_good: impl FnOnce() -> Checkpoint) -> Result<()> {
    if !loss.is_finite() || loss > cfg.divergence_loss {
        return Err(Error::Diverged { step, loss, last_good: Some(Box::new(last_good())) });
    }
    Ok(())
}

/// Trains every base parameter. Returns one loss record per step.
pub fn pretrain_base(model: &mut Denoiser, data: &[TrainingPair], cfg: &TrainConfig) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    check_data(data)?;
    let mut opt = Rmsprop::new(model.params(), cfg.lr, cfg.clip_norm);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let plan = plan_step(cfg, step, data);
        let (loss, grads) = batch_gradient(model, None, data, &plan)?;
        diverged(cfg, step, loss, || Checkpoint::Base(model.clone()))?;
        opt.step(model.params_mut(), &grads);
        curve.push(LossRecord { step, loss, lr: cfg.lr });
    }
    Ok(curve)
}

/// Trains only the adapters; the base model is borrowed immutably, so its
/// parameters are untouched by construction.
pub fn train_lora(
    model: &Denoiser,
    adapters: &mut LoraAdapters,
    data: &[TrainingPair],
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    check_data(data)?;
    if adapters.base_fingerprint != model.config().fingerprint() {
        return Err(Error::Compatibility("adapters were built for a different base configuration".into()));
    }
    let mut opt = Rmsprop::new(adapters.params(), cfg.lr, cfg.clip_norm);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let plan = plan_step(cfg, step, data);
        let (loss, grads) = batch_gradient(model, Some(adapters), data, &plan)?;
        diverged(cfg, step, loss, || Checkpoint::Adapters(adapters.clone()))?;
        opt.step(adapters.params_mut(), &grads);
        curve.push(LossRecord { step, loss, lr: cfg.lr });
    }
    Ok(curve)
}

/// Held-out flow-matching loss with `draws` fixed `(t, x₀)` samples per item,
/// seeded per item so different models are compared on identical draws.
pub fn validation_loss(model: &dyn VelocityModel, data: &[TrainingPair], draws: usize, seed: u64) -> Result<f64> {
    check_data(data)?;
    let per_item = par::map(data.len(), |i| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut total = 0.0;
        for k in 0..draws.max(1) {
            // stratified t keeps the estimate stable across the schedule
            let mut d = FlowDraw::draw(&mut rng, data[i].target.len(), 0.0);
            d.t = (k as f64 + d.t) / draws.max(1) as f64;
            total += super::flow::flow_matching_loss_with(model, core::slice::from_ref(&data[i]), core::slice::from_ref(&d))?;
        }
        Ok(total / draws.max(1) as f64)
    });
    let mut sum = 0.0;
    for r in per_item {
        sum += r?;
    }
    Ok(sum / data.len() as f64)
}
