//! End-to-end evaluation of the three pipeline variants on held-out objects.

use alloc::format;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::camera::{make_rig, CameraPose, RigSpec};
use crate::error::{Error, Result};
use crate::geometry::{carve_object_with, CarveOptions, MaskVariant, ObjectSample};
use crate::metrics;
use crate::model::{sample, sample_per_frame, Denoiser, LoraAdapters, SampleConfig};
use crate::par;
use crate::recon::{fit, init_cloud, per_view_psnr, random_cloud, ReconConfig, InitMode};
use crate::render::{render, Image, MaskImage, RenderSettings};
use crate::sequence::{close_loop, composite_known, open_loop, render_sequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(rename_all = "snake_case"))]
pub enum EvalVariant {
    /// Reconstruct from the carved frames, ignoring masked pixels.
    MaskedOnly,
    /// Inpaint every view on its own, then reconstruct.
    PerFrameInpaint,
    /// Inpaint the loop-closed orbit jointly, then reconstruct.
    ConsistentInpaint,
}

impl EvalVariant {
    pub const ALL: [EvalVariant; 3] = [EvalVariant::MaskedOnly, EvalVariant::PerFrameInpaint, EvalVariant::ConsistentInpaint];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalVariant::MaskedOnly => "masked_only",
            EvalVariant::PerFrameInpaint => "per_frame_inpaint",
            EvalVariant::ConsistentInpaint => "consistent_inpaint",
        }
    }

    pub fn needs_model(self) -> bool {
        self != EvalVariant::MaskedOnly
    }
}

/// A base model with optional adapters.
#[derive(Debug, Clone, Copy)]
pub struct Inpainter<'a> {
    pub base: &'a Denoiser,
    pub adapters: Option<&'a LoraAdapters>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize), serde(default, deny_unknown_fields))]
pub struct EvalConfig {
    /// Input orbit; `n_views` is overridden by the view sweep.
    pub rig: RigSpec,
    /// Views of the held-out orbit, placed half a step from the 16-view input azimuths.
    pub heldout_views: usize,
    pub recon: ReconConfig,
    pub sample: SampleConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rig: RigSpec::default(),
            heldout_views: 16,
            recon: ReconConfig { iterations: 1000, ..ReconConfig::default() },
            sample: SampleConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn heldout_rig(&self) -> RigSpec {
        RigSpec {
            n_views: self.heldout_views,
            azimuth_offset_deg: self.rig.azimuth_offset_deg + 180.0 / self.heldout_views.max(1) as f64,
            ..self.rig
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ObjectScore {
    pub seed: u64,
    pub label: usize,
    pub mask_variant: MaskVariant,
    pub psnr: f64,
    pub ssim: f64,
    /// Mean PSNR of the fitted cloud against the frames it was fitted to.
    pub consistency_psnr: f64,
    pub per_view_psnr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MetricReport {
    pub variant: EvalVariant,
    pub views: usize,
    pub count: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub consistency_psnr: f64,
    pub objects: Vec<ObjectScore>,
}

impl MetricReport {
    fn aggregate(variant: EvalVariant, views: usize, objects: Vec<ObjectScore>) -> Self {
        let p: Vec<f64> = objects.iter().map(|o| o.psnr).collect();
        let s: Vec<f64> = objects.iter().map(|o| o.ssim).collect();
        let c: Vec<f64> = objects.iter().map(|o| o.consistency_psnr).collect();
        let (psnr_mean, psnr_std) = metrics::mean_std(&p);
        let (ssim_mean, ssim_std) = metrics::mean_std(&s);
        Self {
            variant,
            views,
            count: objects.len(),
            psnr_mean,
            psnr_std,
            ssim_mean,
            ssim_std,
            consistency_psnr: metrics::mean_std(&c).0,
            objects,
        }
    }
}

/// Frames the variant hands to the reconstructor, plus the pixels to ignore.
pub fn variant_frames(
    sample_obj: &ObjectSample,
    variant: EvalVariant,
    inpainter: Option<Inpainter<'_>>,
    rig: &[CameraPose],
    sample_cfg: &SampleConfig,
) -> Result<(Vec<Image>, Option<Vec<MaskImage>>)> {
    let carved = carve_object_with(sample_obj, CarveOptions { keep_fraction_floor: Some(0.0) })?;
    let settings = RenderSettings::default();
    let (seq, _) = render_sequence(&sample_obj.full, &carved, &sample_obj.mask, rig, &settings, sample_obj.label)?;
    let cfg = SampleConfig { seed: sample_cfg.seed ^ sample_obj.seed.wrapping_mul(0xA24B_AED4_963E_E407), ..*sample_cfg };
    match variant {
        EvalVariant::MaskedOnly => Ok((seq.frames.clone(), Some(seq.masks.clone()))),
        EvalVariant::PerFrameInpaint => {
            let m = inpainter.ok_or_else(|| Error::Configuration("per-frame inpainting needs a model".into()))?;
            let generated = sample_per_frame(m.base, m.adapters, &seq, &cfg)?;
            Ok((composite_known(&generated, &seq)?, None))
        }
        EvalVariant::ConsistentInpaint => {
            let m = inpainter.ok_or_else(|| Error::Configuration("consistent inpainting needs a model".into()))?;
            let closed = close_loop(&seq)?;
            let mut generated = sample(m.base, m.adapters, &closed, &cfg)?;
            generated.pop();
            let opened = open_loop(&closed)?;
            Ok((composite_known(&generated, &opened)?, None))
        }
    }
}

/// Runs one variant on one object and scores it on the held-out orbit.
pub fn evaluate_object(
    sample_obj: &ObjectSample,
    variant: EvalVariant,
    inpainter: Option<Inpainter<'_>>,
    config: &EvalConfig,
) -> Result<ObjectScore> {
    let rig = make_rig(&config.rig)?;
    let heldout = make_rig(&config.heldout_rig())?;
    let (frames, ignore) = variant_frames(sample_obj, variant, inpainter, &rig, &config.sample)?;
    let carved = carve_object_with(sample_obj, CarveOptions { keep_fraction_floor: Some(0.0) })?;
    let seed = config.recon.seed ^ sample_obj.seed;
    let init = match config.recon.init {
        InitMode::CarryKnownPlusMaskFill => init_cloud(&carved, &sample_obj.mask, carved.len() + config.recon.new_splats, seed)?,
        InitMode::Random => random_cloud(config.recon.new_splats, seed),
    };
    let recon_cfg = ReconConfig { seed, ..config.recon };
    let fitted = fit(&frames, &rig, ignore.as_deref(), init, &recon_cfg)?.cloud;

    let settings = RenderSettings::default();
    let mut psnr = Vec::with_capacity(heldout.len());
    let mut ssim = Vec::with_capacity(heldout.len());
    for pose in &heldout {
        let truth = render(&sample_obj.full, pose, &settings);
        let got = render(&fitted, pose, &settings);
        psnr.push(metrics::psnr(&got, &truth)?);
        ssim.push(metrics::ssim(&got, &truth)?);
    }
    let fit_psnr = per_view_psnr(&fitted, &frames, &rig)?;
    Ok(ObjectScore {
        seed: sample_obj.seed,
        label: sample_obj.label,
        mask_variant: sample_obj.mask.variant,
        psnr: metrics::mean_std(&psnr).0,
        ssim: metrics::mean_std(&ssim).0,
        consistency_psnr: metrics::mean_std(&fit_psnr).0,
        per_view_psnr: psnr,
    })
}

/// Scores `variant` on every object; objects run in parallel and are reported
/// in dataset order.
pub fn evaluate_run(
    dataset: &[ObjectSample],
    variant: EvalVariant,
    inpainter: Option<Inpainter<'_>>,
    config: &EvalConfig,
) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::param("evaluation dataset is empty"));
    }
    if variant.needs_model() && inpainter.is_none() {
        return Err(Error::Configuration(format!("{} requires trained model artifacts", variant.as_str())));
    }
    let scores = par::map(dataset.len(), |i| evaluate_object(&dataset[i], variant, inpainter, config));
    let objects = scores.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::aggregate(variant, config.rig.n_views, objects))
}

/// Consistent-variant reports for each input view count, sorted ascending.
pub fn view_sweep(
    dataset: &[ObjectSample],
    inpainter: Inpainter<'_>,
    config: &EvalConfig,
    views: &[usize],
) -> Result<Vec<MetricReport>> {
    let mut sorted = views.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted
        .into_iter()
        .map(|n| {
            let cfg = EvalConfig { rig: RigSpec { n_views: n, ..config.rig }, ..*config };
            evaluate_run(dataset, EvalVariant::ConsistentInpaint, Some(inpainter), &cfg)
        })
        .collect()
}

/// Fixed reconstruction used by [`consistency_score`].
pub fn consistency_config(budget: usize, seed: u64) -> ReconConfig {
    ReconConfig { iterations: 1500, init: InitMode::Random, new_splats: budget, seed, ..ReconConfig::default() }
}

/// Fits a cloud to the frames and returns the mean PSNR of its rerenders
/// against them. Mutually inconsistent views cannot all be explained by one
/// cloud and score lower.
pub fn consistency_score(frames: &[Image], poses: &[CameraPose], recon_budget: usize, seed: u64) -> Result<f64> {
    if frames.len() < 4 {
        return Err(Error::param("consistency scoring needs at least 4 views"));
    }
    let cfg = consistency_config(recon_budget, seed);
    let cloud = fit(frames, poses, None, random_cloud(recon_budget, seed), &cfg)?.cloud;
    Ok(metrics::mean_std(&per_view_psnr(&cloud, frames, poses)?).0)
}
