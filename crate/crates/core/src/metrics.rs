//! Full-reference image metrics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::render::Image;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::param(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Mean squared error over all pixels and channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (*x as f64 - *y as f64) * (*x as f64 - *y as f64)).sum();
    Ok(sum / a.pixels.len().max(1) as f64)
}

/// `20·log10(1/√MSE)` for images in `[0, 1]`; [`PSNR_CAP`] when MSE is zero.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        -10.0 * math::log10(mse)
    }
}

pub fn luma(img: &Image) -> Vec<f64> {
    img.pixels
        .chunks_exact(3)
        .map(|p| LUMA[0] * p[0] as f64 + LUMA[1] * p[1] as f64 + LUMA[2] * p[2] as f64)
        .collect()
}

/// Normalized 11×11 Gaussian weights, row-major.
pub fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            math::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
        })
        .collect();
    let total: f64 = g.iter().sum();
    let mut w = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            w[i * SSIM_WINDOW + j] = g[i] * g[j] / (total * total);
        }
    }
    w
}

/// Window statistics at one valid window position.
struct Moments {
    mx: f64,
    my: f64,
    exx: f64,
    eyy: f64,
    exy: f64,
}

impl Moments {
    fn ssim(&self) -> f64 {
        let (a1, a2, b1, b2) = self.terms();
        a1 * a2 / (b1 * b2)
    }

    fn terms(&self) -> (f64, f64, f64, f64) {
        let vx = self.exx - self.mx * self.mx;
        let vy = self.eyy - self.my * self.my;
        let cxy = self.exy - self.mx * self.my;
        (
            2.0 * self.mx * self.my + SSIM_C1,
            2.0 * cxy + SSIM_C2,
            self.mx * self.mx + self.my * self.my + SSIM_C1,
            vx + vy + SSIM_C2,
        )
    }
}

fn moments(x: &[f64], y: &[f64], width: usize, ox: usize, oy: usize, w: &[f64]) -> Moments {
    let mut m = Moments { mx: 0.0, my: 0.0, exx: 0.0, eyy: 0.0, exy: 0.0 };
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let k = (oy + i) * width + ox + j;
            let wk = w[i * SSIM_WINDOW + j];
            let (a, b) = (x[k], y[k]);
            m.mx += wk * a;
            m.my += wk * b;
            m.exx += wk * a * a;
            m.eyy += wk * b * b;
            m.exy += wk * a * b;
        }
    }
    m
}

fn check_ssim(a: &Image, b: &Image) -> Result<()> {
    check_same(a, b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::param(format!("SSIM needs images of at least {SSIM_WINDOW}px per side")));
    }
    Ok(())
}

/// Mean SSIM over every window position fully inside the image, on luma.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_ssim(a, b)?;
    let (x, y) = (luma(a), luma(b));
    let w = gaussian_window();
    let (nx, ny) = (a.width - SSIM_WINDOW + 1, a.height - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..ny {
        for ox in 0..nx {
            total += moments(&x, &y, a.width, ox, oy, &w).ssim();
        }
    }
    Ok(total / (nx * ny) as f64)
}

/// Mean SSIM and its gradient w.r.t. every RGB value of `a` (interleaved).
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    check_ssim(a, b)?;
    let (x, y) = (luma(a), luma(b));
    let w = gaussian_window();
    let width = a.width;
    let (nx, ny) = (a.width - SSIM_WINDOW + 1, a.height - SSIM_WINDOW + 1);
    let count = (nx * ny) as f64;
    let mut total = 0.0;
    let mut gy = vec![0.0; x.len()];
    for oy in 0..ny {
        for ox in 0..nx {
            let m = moments(&x, &y, width, ox, oy, &w);
            let (a1, a2, b1, b2) = m.terms();
            let s = a1 * a2 / (b1 * b2);
            total += s;
            // partials w.r.t. the window mean of x, E[x²] and E[xy]
            let d_mx = (2.0 * m.my * a2 - 2.0 * m.my * a1) / (b1 * b2) - s * (2.0 * m.mx / b1 - 2.0 * m.mx / b2);
            let d_exx = -s / b2;
            let d_exy = 2.0 * a1 / (b1 * b2);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let k = (oy + i) * width + ox + j;
                    let wk = w[i * SSIM_WINDOW + j] / count;
                    gy[k] += wk * (d_mx + 2.0 * x[k] * d_exx + y[k] * d_exy);
                }
            }
        }
    }
    let grad = gy.iter().flat_map(|g| LUMA.map(|l| l * g)).collect();
    Ok((total / count, grad))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, math::sqrt(var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Vec3;

    #[test]
    fn uniform_error_gives_twenty_db() {
        let a = Image::filled(16, 16, Vec3::new(0.25, 0.5, 0.75));
        let b = Image::filled(16, 16, Vec3::new(0.35, 0.6, 0.85));
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn window_is_normalized() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(w[0], w[120]);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::filled(10, 10, Vec3::ZERO);
        assert!(ssim(&a, &a).is_err());
        let b = Image::filled(11, 11, Vec3::ZERO);
        assert_eq!(ssim(&b, &b).unwrap(), 1.0);
    }
}
