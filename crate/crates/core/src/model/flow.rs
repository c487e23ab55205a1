use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::lora::LoraAdapters;
use super::net::{from_signal, Conditioning, Denoiser};
use crate::error::{Error, Result};
use crate::par;
use crate::render::Image;
use crate::sequence::FrameSequence;

/// Anything that predicts a velocity field over frame-stack signals.
pub trait VelocityModel: Sync {
    fn velocity(&self, t: f64, x_t: &[f64], cond: &Conditioning, cond_drop: bool) -> Result<Vec<f64>>;
}

/// A base denoiser with optional adapters applied at `lora_scale`.
#[derive(Debug, Clone, Copy)]
pub struct Adapted<'a> {
    pub model: &'a Denoiser,
    pub adapters: Option<&'a LoraAdapters>,
    pub lora_scale: f64,
}

impl<'a> Adapted<'a> {
    pub fn base(model: &'a Denoiser) -> Self {
        Self { model, adapters: None, lora_scale: 1.0 }
    }

    pub fn with(model: &'a Denoiser, adapters: &'a LoraAdapters, lora_scale: f64) -> Self {
        Self { model, adapters: Some(adapters), lora_scale }
    }
}

impl VelocityModel for Adapted<'_> {
    fn velocity(&self, t: f64, x_t: &[f64], cond: &Conditioning, cond_drop: bool) -> Result<Vec<f64>> {
        self.model.forward(self.adapters.map(|a| (a, self.lora_scale)), t, x_t, cond, cond_drop)
    }
}

/// `x_t = (1 − t)·x₀ + t·x₁`.
pub fn flow_path(x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect()
}

/// `u* = x₁ − x₀`.
pub fn target_velocity(x0: &[f64], x1: &[f64]) -> Vec<f64> {
    x0.iter().zip(x1).map(|(a, b)| b - a).collect()
}

/// One training example: conditioning and the clean target signal.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub cond: Conditioning,
    pub target: Vec<f64>,
    /// For loop-closed orbits, the index of the first orbital frame; the
    /// orbit may then be rotated cyclically as augmentation.
    pub loop_start: Option<usize>,
}

impl TrainingPair {
    pub fn new(cond: Conditioning, target: Vec<f64>, loop_start: Option<usize>) -> Result<Self> {
        if target.len() != cond.signal_len() {
            return Err(Error::param("target and conditioning differ in size"));
        }
        Ok(Self { cond, target, loop_start })
    }

    /// Builds a pair from an assembled sequence and its aligned targets.
    pub fn from_sequence(seq: &FrameSequence, targets: &[Image]) -> Result<Self> {
        if targets.len() != seq.len() {
            return Err(Error::param("targets must align with the sequence frames"));
        }
        let loop_start = seq.loop_closed.then(|| seq.loop_start());
        Self::new(Conditioning::from_sequence(seq)?, super::net::to_signal(targets), loop_start)
    }

    /// Rotates the orbit so it starts at orbital frame `shift`, keeping the
    /// reference slot and re-closing the loop.
    pub fn rotated(&self, shift: usize) -> Self {
        let Some(start) = self.loop_start else { return self.clone() };
        let unique = self.cond.frames - start - 1;
        if unique == 0 || shift % unique == 0 {
            return self.clone();
        }
        let mut order: Vec<usize> = (0..start).collect();
        order.extend((0..unique).map(|i| start + (i + shift) % unique));
        order.push(start + shift % unique);
        let frame_len = self.cond.size * self.cond.size * 3;
        Self {
            cond: self.cond.reorder(&order),
            target: super::net::reorder_signal(&self.target, frame_len, &order),
            loop_start: self.loop_start,
        }
    }
}

/// Random quantities of one flow-matching evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDraw {
    pub t: f64,
    pub x0: Vec<f64>,
    pub cond_drop: bool,
}

impl FlowDraw {
    pub fn draw<R: Rng>(rng: &mut R, len: usize, cond_dropout: f64) -> Self {
        let t = rng.random::<f64>();
        let cond_drop = cond_dropout > 0.0 && rng.random::<f64>() < cond_dropout;
        Self { t, x0: standard_normal(rng, len), cond_drop }
    }
}

pub fn standard_normal<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn mean_square_error(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64
}

/// Mean over items of the per-element squared velocity error, with the random
/// quantities given explicitly.
pub fn flow_matching_loss_with(model: &dyn VelocityModel, batch: &[TrainingPair], draws: &[FlowDraw]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    if draws.len() != batch.len() {
        return Err(Error::param("one draw per batch item is required"));
    }
    let mut total = 0.0;
    for (pair, d) in batch.iter().zip(draws) {
        let x_t = flow_path(&d.x0, &pair.target, d.t);
        let pred = model.velocity(d.t, &x_t, &pair.cond, d.cond_drop)?;
        total += mean_square_error(&pred, &target_velocity(&d.x0, &pair.target));
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        let ts: Vec<f64> = draws.iter().map(|d| d.t).collect();
        return Err(Error::Numerical(format!("flow-matching loss is {loss} (t = {ts:?})")));
    }
    Ok(loss)
}

/// Flow-matching loss with `t ~ U(0,1)` and standard normal `x₀` drawn from `rng`.
pub fn flow_matching_loss<R: Rng>(model: &dyn VelocityModel, batch: &[TrainingPair], rng: &mut R) -> Result<f64> {
    let draws: Vec<FlowDraw> = batch.iter().map(|p| FlowDraw::draw(rng, p.target.len(), 0.0)).collect();
    flow_matching_loss_with(model, batch, &draws)
}

/// `û = u_uncond + g·(u_cond − u_uncond)`.
pub fn guided_velocity(cond: &[f64], uncond: &[f64], guidance: f64) -> Vec<f64> {
    cond.iter().zip(uncond).map(|(c, u)| u + guidance * (c - u)).collect()
}

/// Integrates `dx/dt = field(t, x)` from `t = 0` to `t = 1` with uniform Heun steps.
pub fn heun_integrate(
    mut x: Vec<f64>,
    steps: usize,
    mut field: impl FnMut(f64, &[f64]) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if steps < 1 {
        return Err(Error::param("at least one integration step is required"));
    }
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = i as f64 * dt;
        let t_next = if i + 1 == steps { 1.0 } else { (i + 1) as f64 * dt };
        let d1 = field(t, &x)?;
        let pred: Vec<f64> = x.iter().zip(&d1).map(|(a, d)| a + dt * d).collect();
        let d2 = field(t_next, &pred)?;
        for ((xv, a), b) in x.iter_mut().zip(&d1).zip(&d2) {
            *xv += 0.5 * dt * (a + b);
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance: f64,
    pub lora_scale: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: 20, guidance: 4.0, lora_scale: 1.0, seed: 0 }
    }
}

/// Classifier-free-guided Heun sampling in signal space, starting from
/// standard normal noise seeded by `seed`.
pub fn sample_signal(
    model: &dyn VelocityModel,
    cond: &Conditioning,
    steps: usize,
    guidance: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if steps < 1 {
        return Err(Error::param("at least one sampling step is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = standard_normal(&mut rng, cond.signal_len());
    heun_integrate(x0, steps, |t, x| {
        let c = model.velocity(t, x, cond, false)?;
        if guidance == 1.0 {
            return Ok(c);
        }
        let u = model.velocity(t, x, cond, true)?;
        Ok(guided_velocity(&c, &u, guidance))
    })
}

/// Generates every frame of `seq` jointly. Output frames are clamped to `[0, 1]`.
pub fn sample(
    model: &Denoiser,
    adapters: Option<&LoraAdapters>,
    seq: &FrameSequence,
    cfg: &SampleConfig,
) -> Result<Vec<Image>> {
    seq.validate(true)?;
    let velocity = Adapted { model, adapters, lora_scale: cfg.lora_scale };
    let cond = Conditioning::from_sequence(seq)?;
    let out = sample_signal(&velocity, &cond, cfg.steps, cfg.guidance, cfg.seed)?;
    Ok(from_signal(&out, cond.frames, cond.size))
}

/// Seed of frame `f` when frames are generated independently.
pub fn frame_seed(seed: u64, f: usize) -> u64 {
    seed ^ (f as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Generates each frame as its own one-frame sequence with its own noise,
/// so no information is shared across views.
pub fn sample_per_frame(
    model: &Denoiser,
    adapters: Option<&LoraAdapters>,
    seq: &FrameSequence,
    cfg: &SampleConfig,
) -> Result<Vec<Image>> {
    seq.validate(false)?;
    let velocity = Adapted { model, adapters, lora_scale: cfg.lora_scale };
    let cond = Conditioning::from_sequence(seq)?;
    let frames = par::map(cond.frames, |f| {
        let single = cond.frame(f);
        sample_signal(&velocity, &single, cfg.steps, cfg.guidance, frame_seed(cfg.seed, f))
            .map(|s| from_signal(&s, 1, cond.size).remove(0))
    });
    frames.into_iter().collect()
}
