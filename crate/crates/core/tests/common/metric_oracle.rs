//! Metric formulas written out directly: PSNR from the mean squared error,
//! SSIM from two-pass weighted window statistics.

#![allow(dead_code)]

use loopfill_core::render::Image;

pub fn psnr_oracle(a: &Image, b: &Image) -> f64 {
    let n = a.pixels.len() as f64;
    let mse: f64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / n;
    10.0 * (1.0 / mse).log10()
}

/// Textbook SSIM: luminance, contrast and structure terms from two-pass
/// weighted statistics over every 11x11 window inside the image.
pub fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let luma = |img: &Image| -> Vec<f64> {
        img.pixels.chunks(3).map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect()
    };
    let (x, y) = (luma(a), luma(b));
    let mut g = [0.0f64; 11];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = g.iter().sum();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for oy in 0..=a.height - 11 {
        for ox in 0..=a.width - 11 {
            let mut mx = 0.0;
            let mut my = 0.0;
            for i in 0..11 {
                for j in 0..11 {
                    let w = g[i] * g[j] / (s * s);
                    let k = (oy + i) * a.width + ox + j;
                    mx += w * x[k];
                    my += w * y[k];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let w = g[i] * g[j] / (s * s);
                    let k = (oy + i) * a.width + ox + j;
                    vx += w * (x[k] - mx).powi(2);
                    vy += w * (y[k] - my).powi(2);
                    cxy += w * (x[k] - mx) * (y[k] - my);
                }
            }
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}
