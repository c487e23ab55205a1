//! Differentiable Gaussian splatting.
//!
//! Each splat is projected to a 2D Gaussian with the perspective Jacobian
//! (`Σ' = J W Σ Wᵀ Jᵀ`), sorted by camera depth, and alpha-composited front to
//! back per pixel. [`render_backward`] returns exact derivatives of that
//! piecewise-smooth image with respect to every splat parameter.

mod backward;
mod forward;
mod mask;

use alloc::vec;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Quat, Vec3};

pub use backward::{render_backward, RenderGradients};
pub use forward::{render, render_alpha, render_with_stats, RenderStats};
pub use mask::render_mask;

pub const TILE_SIZE: usize = 16;

/// Rasterization constants shared by the forward and backward passes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub background: Vec3,
    /// Footprints end at this Mahalanobis radius.
    pub sigma_cutoff: f64,
    /// Contributions with `opacity·G` below this are skipped.
    pub alpha_min: f64,
    /// Variance (px²) added to the projected covariance diagonal.
    pub dilation: f64,
    /// Splats closer than this camera depth are culled.
    pub near: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings { background: WHITE, sigma_cutoff: 3.0, alpha_min: 1.0 / 255.0, dilation: 0.3, near: 0.01 }
    }
}

impl RenderSettings {
    pub fn with_background(background: Vec3) -> Self {
        RenderSettings { background, ..Self::default() }
    }
}

pub const WHITE: Vec3 = Vec3([1.0, 1.0, 1.0]);

/// Row-major interleaved RGB image.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: Vec3) -> Image {
        let mut pixels = vec![0.0; width * height * 3];
        for px in pixels.chunks_exact_mut(3) {
            for c in 0..3 {
                px[c] = color[c] as f32;
            }
        }
        Image { width, height, pixels }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f32>) -> Result<Image> {
        if pixels.len() != width * height * 3 {
            return Err(Error::param("pixel buffer does not match image dimensions"));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::param("pixel values must lie in [0,1]"));
        }
        Ok(Image { width, height, pixels })
    }

    /// Builds an image from f64 values, clamping into [0,1].
    pub fn from_f64(width: usize, height: usize, values: &[f64]) -> Image {
        assert_eq!(values.len(), width * height * 3);
        let pixels = values
            .iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) as f32 })
            .collect();
        Image { width, height, pixels }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|v| *v as f64).collect()
    }
}

/// Binary mask; values are exactly 0.0 or 1.0.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl MaskImage {
    pub fn zeros(width: usize, height: usize) -> MaskImage {
        MaskImage { width, height, values: vec![0.0; width * height] }
    }

    pub fn ones(width: usize, height: usize) -> MaskImage {
        MaskImage { width, height, values: vec![1.0; width * height] }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<MaskImage> {
        if values.len() != width * height {
            return Err(Error::param("mask buffer does not match dimensions"));
        }
        if values.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::param("mask values must be binary"));
        }
        Ok(MaskImage { width, height, values })
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }
}

/// `Σ = R S Sᵀ Rᵀ` for a (re-normalized) quaternion and per-axis scales.
pub fn build_covariance(q: Quat, s: Vec3) -> Mat3 {
    let r = q.normalized().to_rotation();
    let m = r.mul_mat(&Mat3::diag(s));
    m.mul_mat(&m.transpose())
}

/// `exp(-½ xᵀ Σ⁻¹ x)`.
pub fn gaussian_eval(x: Vec3, sigma: &Mat3) -> Result<f64> {
    let condition = sigma.condition_estimate();
    if !(condition < 1e14) {
        return Err(Error::SingularCovariance { condition });
    }
    let inv = sigma.inverse().ok_or(Error::SingularCovariance { condition })?;
    Ok(math::exp(-0.5 * x.dot(inv.mul_vec(x))))
}

/// One splat's contribution along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayContribution {
    pub color: Vec3,
    pub opacity: f64,
    pub footprint: f64,
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Composite {
    /// Accumulated splat color, without background.
    pub color: Vec3,
    /// Transmittance left after the last contribution.
    pub transmittance: f64,
}

impl Composite {
    pub fn over(&self, background: Vec3) -> Vec3 {
        self.color + background * self.transmittance
    }
}

/// Front-to-back compositing `c = Σ cᵢ αᵢ Gᵢ Πⱼ<ᵢ (1 − αⱼ Gⱼ)`.
///
/// Contributions must already be sorted by depth; this is checked in debug builds.
pub fn composite_ray(contributions: &[RayContribution]) -> Composite {
    debug_assert!(
        contributions.windows(2).all(|w| w[0].depth <= w[1].depth),
        "ray contributions must be sorted front to back"
    );
    let mut color = Vec3::ZERO;
    let mut t = 1.0;
    for c in contributions {
        let a = c.opacity * c.footprint;
        color += c.color * (a * t);
        t *= 1.0 - a;
    }
    Composite { color, transmittance: t }
}

/// Screen-space footprint of one splat plus the intermediates the backward
/// pass needs.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ProjectedSplat {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    /// Inverse 2D covariance `[a, b, c]` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub x_range: (usize, usize),
    pub y_range: (usize, usize),
    pub opacity: f64,
    pub color: Vec3,
}

pub(crate) enum Projected {
    Visible(ProjectedSplat),
    Behind,
    Degenerate,
    Offscreen,
}

pub(crate) fn project_splat(
    mean: Vec3,
    rotation: Quat,
    scale: Vec3,
    opacity: f64,
    color: Vec3,
    pose: &crate::camera::CameraPose,
    settings: &RenderSettings,
) -> Projected {
    let cam = pose.to_camera(mean);
    if !(cam.z() > settings.near) {
        return Projected::Behind;
    }
    let f = pose.focal();
    let (cx, cy) = pose.principal_point();
    let iz = 1.0 / cam.z();
    let u = f * cam.x() * iz + cx;
    let v = f * cam.y() * iz + cy;

    let sigma = build_covariance(rotation, scale);
    let w = &pose.rotation;
    // T = J W, J = [[f/z, 0, -f x/z²], [0, f/z, -f y/z²]]
    let j0 = Vec3::new(f * iz, 0.0, -f * cam.x() * iz * iz);
    let j1 = Vec3::new(0.0, f * iz, -f * cam.y() * iz * iz);
    let wt = w.transpose();
    let t0 = wt.mul_vec(j0);
    let t1 = wt.mul_vec(j1);
    let s_t0 = sigma.mul_vec(t0);
    let s_t1 = sigma.mul_vec(t1);
    let a = t0.dot(s_t0) + settings.dilation;
    let b = t0.dot(s_t1);
    let c = t1.dot(s_t1) + settings.dilation;
    let det = a * c - b * b;
    if !(det > 0.0) || !det.is_finite() {
        return Projected::Degenerate;
    }
    let conic = [c / det, -b / det, a / det];

    let rx = settings.sigma_cutoff * math::sqrt(a);
    let ry = settings.sigma_cutoff * math::sqrt(c);
    // pixel centres sit at integer + 0.5
    let x0 = libm::ceil(u - rx - 0.5).max(0.0);
    let x1 = libm::floor(u + rx - 0.5).min(pose.width as f64 - 1.0);
    let y0 = libm::ceil(v - ry - 0.5).max(0.0);
    let y1 = libm::floor(v + ry - 0.5).min(pose.height as f64 - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return Projected::Offscreen;
    }
    Projected::Visible(ProjectedSplat {
        u,
        v,
        depth: cam.z(),
        conic,
        x_range: (x0 as usize, x1 as usize),
        y_range: (y0 as usize, y1 as usize),
        opacity,
        color,
    })
}

/// Footprint of `p` at pixel centre `(px, py)`, or `None` past the cutoff.
#[inline]
pub(crate) fn footprint(p: &ProjectedSplat, px: f64, py: f64, cutoff_sq: f64) -> Option<(f64, f64, f64)> {
    let dx = px - p.u;
    let dy = py - p.v;
    let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
    if q > cutoff_sq {
        return None;
    }
    Some((math::exp(-0.5 * q), dx, dy))
}
