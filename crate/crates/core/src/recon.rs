//! Fitting a Gaussian cloud to multi-view frames by gradient descent on a
//! photometric loss. Target frames are only ever read.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Checkpoint, Error, Result};
use crate::geometry::{mean_nearest_neighbor_distance, GaussianCloud, Mask3D, Splat};
use crate::math::{self, Quat, Vec3};
use crate::metrics;
use crate::render::{render, render_backward, Image, MaskImage, RenderSettings};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default, deny_unknown_fields))]
pub struct LearningRates {
    /// Multiplied by the scene extent.
    pub means: f64,
    pub rotations: f64,
    pub scales: f64,
    pub opacities: f64,
    pub colors: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { means: 1.6e-3, rotations: 5e-3, scales: 1e-2, opacities: 5e-2, colors: 1e-2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "kebab-case"))]
pub enum InitMode {
    /// Known splats plus new splats sampled inside the mask.
    CarryKnownPlusMaskFill,
    /// Random splats in the canonical cube.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default, deny_unknown_fields))]
pub struct ReconConfig {
    pub iterations: usize,
    pub lr: LearningRates,
    /// The means learning rate decays exponentially to this fraction.
    pub means_lr_final_ratio: f64,
    pub scene_extent: f64,
    pub lambda_ssim: f64,
    pub init: InitMode,
    /// Splats added inside the mask (carry-known) or in total (random).
    pub new_splats: usize,
    pub densify: bool,
    pub densify_every: usize,
    pub densify_grad_threshold: f64,
    /// Splats whose opacity falls below this are dropped at densify intervals; 0 disables.
    pub prune_opacity: f64,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: LearningRates::default(),
            means_lr_final_ratio: 0.01,
            scene_extent: 2.0,
            lambda_ssim: 0.2,
            init: InitMode::CarryKnownPlusMaskFill,
            new_splats: 64,
            densify: false,
            densify_every: 100,
            densify_grad_threshold: 2e-4,
            prune_opacity: 0.0,
            seed: 0,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::param("iterations must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda_ssim) {
            return Err(Error::param("lambda_ssim must lie in [0, 1]"));
        }
        let lr = self.lr;
        if [lr.means, lr.rotations, lr.scales, lr.opacities, lr.colors].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::param("learning rates must be finite and non-negative"));
        }
        if self.densify && self.densify_every == 0 {
            return Err(Error::param("densify_every must be positive"));
        }
        Ok(())
    }
}

const FILL_OPACITY: f64 = 0.5;
const FILL_GRAY: f64 = 0.5;
const LOGIT_LIMIT: f64 = 12.0;
const LOG_SCALE_RANGE: (f64, f64) = (-10.0, 3.0);

/// Scale of new splats when the known cloud is too small to measure spacing.
fn fallback_scale(mask: &Mask3D, n: usize) -> f64 {
    let volume: f64 = mask.primitives.iter().map(|p| p.volume()).sum();
    0.5 * libm::cbrt(volume / n.max(1) as f64)
}

/// Carved splats unchanged, followed by `budget − |carved|` mid-gray splats
/// placed uniformly inside the mask primitives.
pub fn init_cloud(carved: &GaussianCloud, mask: &Mask3D, budget: usize, seed: u64) -> Result<GaussianCloud> {
    if budget < carved.len() {
        return Err(Error::param(format!("budget {budget} is below the {} carved splats", carved.len())));
    }
    let extra = budget - carved.len();
    let mut out = carved.clone();
    if extra == 0 {
        return Ok(out);
    }
    mask.validate()?;
    let scale = match mean_nearest_neighbor_distance(&carved.means) {
        Some(d) if d > 0.0 => 2.0 * d,
        _ => fallback_scale(mask, extra),
    };
    let volumes: Vec<f64> = mask.primitives.iter().map(|p| p.volume()).collect();
    let total: f64 = volumes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..extra {
        let mut pick = rng.random::<f64>() * total;
        let mut prim = &mask.primitives[0];
        for (p, v) in mask.primitives.iter().zip(&volumes) {
            prim = p;
            if pick < *v {
                break;
            }
            pick -= v;
        }
        out.push(Splat {
            mean: prim.sample_interior(&mut rng),
            rotation: Quat::IDENTITY,
            scale: Vec3::new(scale, scale, scale),
            opacity: FILL_OPACITY,
            color: Vec3::new(FILL_GRAY, FILL_GRAY, FILL_GRAY),
        });
    }
    Ok(out)
}

/// `n` random splats in the canonical cube with random colours.
pub fn random_cloud(n: usize, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 0.5 * libm::cbrt(8.0 / n.max(1) as f64);
    GaussianCloud::from_splats((0..n).map(|_| Splat {
        mean: Vec3(core::array::from_fn(|_| rng.random_range(-0.8..0.8))),
        rotation: Quat::IDENTITY,
        scale: Vec3::new(scale, scale, scale),
        opacity: FILL_OPACITY,
        color: Vec3(core::array::from_fn(|_| rng.random_range(0.0..1.0))),
    }))
}

/// `(1 − λ)·L1 + λ·(1 − SSIM)` and its gradient w.r.t. every rendered value.
pub fn recon_loss(rendered: &Image, target: &Image, lambda_ssim: f64) -> Result<(f64, Vec<f64>)> {
    if !rendered.same_shape(target) {
        return Err(Error::param("rendered and target images differ in size"));
    }
    let n = rendered.pixels.len() as f64;
    let mut l1 = 0.0;
    let mut grad: Vec<f64> = rendered
        .pixels
        .iter()
        .zip(&target.pixels)
        .map(|(r, t)| {
            let d = *r as f64 - *t as f64;
            l1 += d.abs();
            let sign = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
            (1.0 - lambda_ssim) * sign / n
        })
        .collect();
    let mut loss = (1.0 - lambda_ssim) * l1 / n;
    if lambda_ssim > 0.0 {
        let (s, gs) = metrics::ssim_with_grad(rendered, target)?;
        loss += lambda_ssim * (1.0 - s);
        for (g, d) in grad.iter_mut().zip(&gs) {
            *g -= lambda_ssim * d;
        }
    }
    Ok((loss, grad))
}

/// Unconstrained optimisation variables.
#[derive(Clone)]
struct Params {
    means: Vec<f64>,
    rotations: Vec<f64>,
    log_scales: Vec<f64>,
    logit_opacities: Vec<f64>,
    colors: Vec<f64>,
}

impl Params {
    fn from_cloud(c: &GaussianCloud) -> Self {
        Self {
            means: c.means.iter().flat_map(|m| m.0).collect(),
            rotations: c.rotations.iter().flat_map(|q| q.normalized().0).collect(),
            log_scales: c.scales.iter().flat_map(|s| s.0.map(|v| math::ln(v.max(1e-8)))).collect(),
            logit_opacities: c.opacities.iter().map(|o| math::logit(o.clamp(1e-6, 1.0 - 1e-6))).collect(),
            colors: c.colors.iter().flat_map(|v| v.0).collect(),
        }
    }

    fn len(&self) -> usize {
        self.logit_opacities.len()
    }

    fn to_cloud(&self) -> GaussianCloud {
        GaussianCloud::from_splats((0..self.len()).map(|i| Splat {
            mean: Vec3(core::array::from_fn(|a| self.means[3 * i + a])),
            rotation: Quat(core::array::from_fn(|a| self.rotations[4 * i + a])),
            scale: Vec3(core::array::from_fn(|a| math::exp(self.log_scales[3 * i + a]))),
            opacity: math::sigmoid(self.logit_opacities[i]),
            color: Vec3(core::array::from_fn(|a| self.colors[3 * i + a])),
        }))
    }

    fn groups_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [&mut self.means, &mut self.rotations, &mut self.log_scales, &mut self.logit_opacities, &mut self.colors]
    }

    fn is_finite(&self) -> bool {
        [&self.means, &self.rotations, &self.log_scales, &self.logit_opacities, &self.colors]
            .iter()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Renormalizes quaternions and clamps every group to its valid range.
    fn project(&mut self) {
        for q in self.rotations.chunks_exact_mut(4) {
            let n = math::sqrt(q.iter().map(|v| v * v).sum());
            if n > 0.0 {
                q.iter_mut().for_each(|v| *v /= n);
            } else {
                q.copy_from_slice(&Quat::IDENTITY.0);
            }
        }
        self.log_scales.iter_mut().for_each(|v| *v = v.clamp(LOG_SCALE_RANGE.0, LOG_SCALE_RANGE.1));
        self.logit_opacities.iter_mut().for_each(|v| *v = v.clamp(-LOGIT_LIMIT, LOGIT_LIMIT));
        self.colors.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Keeps the listed splats, in the listed order.
    fn select(&self, keep: &[usize]) -> Self {
        let pick = |v: &[f64], w: usize| keep.iter().flat_map(|&i| v[i * w..(i + 1) * w].iter().copied()).collect();
        Self {
            means: pick(&self.means, 3),
            rotations: pick(&self.rotations, 4),
            log_scales: pick(&self.log_scales, 3),
            logit_opacities: pick(&self.logit_opacities, 1),
            colors: pick(&self.colors, 3),
        }
    }
}

const WIDTHS: [usize; 5] = [3, 4, 3, 1, 3];

/// Adam over the five parameter groups.
struct Adam {
    m: [Vec<f64>; 5],
    v: [Vec<f64>; 5],
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-15;

    fn new(n: usize) -> Self {
        Self { m: WIDTHS.map(|w| vec![0.0; n * w]), v: WIDTHS.map(|w| vec![0.0; n * w]), t: 0 }
    }

    fn step(&mut self, params: &mut Params, grads: &[Vec<f64>; 5], lrs: [f64; 5]) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(Self::B1, self.t as f64);
        let c2 = 1.0 - libm::pow(Self::B2, self.t as f64);
        for (k, group) in params.groups_mut().into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..group.len() {
                let g = grads[k][j];
                m[j] = Self::B1 * m[j] + (1.0 - Self::B1) * g;
                v[j] = Self::B2 * v[j] + (1.0 - Self::B2) * g * g;
                group[j] -= lrs[k] * (m[j] / c1) / (math::sqrt(v[j] / c2) + Self::EPS);
            }
        }
    }

    fn select(&mut self, keep: &[usize]) {
        for k in 0..5 {
            let w = WIDTHS[k];
            let pick = |v: &[f64]| keep.iter().flat_map(|&i| v[i * w..(i + 1) * w].iter().copied()).collect();
            self.m[k] = pick(&self.m[k]);
            self.v[k] = pick(&self.v[k]);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconResult {
    pub cloud: GaussianCloud,
    /// Loss of the view used at each iteration.
    pub losses: Vec<f64>,
}

/// Fits a cloud to `frames` seen from `poses`.
pub fn reconstruct(
    frames: &[Image],
    poses: &[CameraPose],
    carved: &GaussianCloud,
    mask: &Mask3D,
    config: &ReconConfig,
) -> Result<ReconResult> {
    reconstruct_masked(frames, poses, None, carved, mask, config)
}

/// As [`reconstruct`]; with `ignore`, the loss gradient is zeroed at pixels
/// where the corresponding mask is set.
pub fn reconstruct_masked(
    frames: &[Image],
    poses: &[CameraPose],
    ignore: Option<&[MaskImage]>,
    carved: &GaussianCloud,
    mask: &Mask3D,
    config: &ReconConfig,
) -> Result<ReconResult> {
    let init = match config.init {
        InitMode::CarryKnownPlusMaskFill => init_cloud(carved, mask, carved.len() + config.new_splats, config.seed)?,
        InitMode::Random => random_cloud(config.new_splats, config.seed),
    };
    fit(frames, poses, ignore, init, config)
}

/// Optimizes `init` against the frames. Zero iterations return `init` unchanged.
pub fn fit(
    frames: &[Image],
    poses: &[CameraPose],
    ignore: Option<&[MaskImage]>,
    init: GaussianCloud,
    config: &ReconConfig,
) -> Result<ReconResult> {
    if frames.is_empty() || frames.len() != poses.len() {
        return Err(Error::param(format!("{} frames for {} poses", frames.len(), poses.len())));
    }
    if let Some(m) = ignore {
        if m.len() != frames.len() {
            return Err(Error::param("one ignore mask per frame is required"));
        }
    }
    for (f, p) in frames.iter().zip(poses) {
        if f.width != p.width || f.height != p.height {
            return Err(Error::param("frame size differs from its camera"));
        }
    }
    if config.iterations == 0 {
        return Ok(ReconResult { cloud: init, losses: Vec::new() });
    }
    config.validate()?;

    let settings = RenderSettings::default();
    let mut params = Params::from_cloud(&init);
    params.project();
    let mut adam = Adam::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xC0FF_EE00);
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut losses = Vec::with_capacity(config.iterations);
    let mut grad_accum = vec![0.0; params.len()];
    let mut grad_count = vec![0usize; params.len()];

    for it in 0..config.iterations {
        if it % frames.len() == 0 {
            order.shuffle(&mut rng);
        }
        let view = order[it % frames.len()];
        let cloud = params.to_cloud();
        let rendered = render(&cloud, &poses[view], &settings);
        let (loss, mut upstream) = recon_loss(&rendered, &frames[view], config.lambda_ssim)?;
        if let Some(masks) = ignore {
            for (i, m) in masks[view].values.iter().enumerate() {
                if *m != 0.0 {
                    upstream[i * 3..i * 3 + 3].fill(0.0);
                }
            }
        }
        let g = render_backward(&cloud, &poses[view], &settings, &upstream)?;

        let mut grads: [Vec<f64>; 5] = WIDTHS.map(|w| vec![0.0; params.len() * w]);
        for i in 0..params.len() {
            for a in 0..3 {
                grads[0][3 * i + a] = g.means[i][a];
                grads[2][3 * i + a] = g.scales[i][a] * cloud.scales[i][a];
                grads[4][3 * i + a] = g.colors[i][a];
            }
            grads[1][4 * i..4 * i + 4].copy_from_slice(&g.rotations[i]);
            let o = cloud.opacities[i];
            grads[3][i] = g.opacities[i] * o * (1.0 - o);
            let gm = g.means[i].norm();
            if gm > 0.0 {
                grad_accum[i] += gm;
                grad_count[i] += 1;
            }
        }
        let progress = it as f64 / config.iterations as f64;
        let means_lr =
            config.lr.means * config.scene_extent * libm::pow(config.means_lr_final_ratio.max(1e-12), progress);
        let lrs = [means_lr, config.lr.rotations, config.lr.scales, config.lr.opacities, config.lr.colors];
        adam.step(&mut params, &grads, lrs);
        params.project();
        if !params.is_finite() || !loss.is_finite() {
            return Err(Error::Diverged { step: it, loss, last_good: Some(Box::new(Checkpoint::Cloud(cloud))) });
        }
        losses.push(loss);

        let boundary = (config.densify || config.prune_opacity > 0.0)
            && (it + 1) % config.densify_every.max(1) == 0
            && it + 1 < config.iterations;
        if boundary {
            let mut keep: Vec<usize> = (0..params.len())
                .filter(|&i| config.prune_opacity <= 0.0 || math::sigmoid(params.logit_opacities[i]) >= config.prune_opacity)
                .collect();
            let kept = keep.len();
            if config.densify {
                let clones: Vec<usize> = keep
                    .iter()
                    .copied()
                    .filter(|&i| grad_count[i] > 0 && grad_accum[i] / grad_count[i] as f64 > config.densify_grad_threshold)
                    .collect();
                keep.extend(clones);
            }
            if keep.is_empty() {
                keep.push(0);
            }
            params = params.select(&keep);
            adam.select(&keep);
            // clones start smaller and slightly displaced so they can separate
            for slot in kept..keep.len() {
                for a in 0..3 {
                    params.log_scales[3 * slot + a] -= 0.2;
                    let s = math::exp(params.log_scales[3 * slot + a]);
                    params.means[3 * slot + a] += rng.random_range(-0.5..0.5) * s;
                }
            }
            grad_accum = vec![0.0; params.len()];
            grad_count = vec![0; params.len()];
        }
    }
    Ok(ReconResult { cloud: params.to_cloud(), losses })
}

/// Per-view PSNR of the cloud's renders against `frames`.
pub fn per_view_psnr(cloud: &GaussianCloud, frames: &[Image], poses: &[CameraPose]) -> Result<Vec<f64>> {
    let settings = RenderSettings::default();
    frames.iter().zip(poses).map(|(f, p)| metrics::psnr(&render(cloud, p, &settings), f)).collect()
}

/// Per-view mean absolute error of the cloud's renders against `frames`.
pub fn per_view_l1(cloud: &GaussianCloud, frames: &[Image], poses: &[CameraPose]) -> Vec<f64> {
    let settings = RenderSettings::default();
    frames
        .iter()
        .zip(poses)
        .map(|(f, p)| {
            let r = render(cloud, p, &settings);
            r.pixels.iter().zip(&f.pixels).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>() / r.pixels.len() as f64
        })
        .collect()
}
