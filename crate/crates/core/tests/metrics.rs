mod common;

use common::metric_oracle::{psnr_oracle, ssim_oracle};
use loopfill_core::math::Vec3;
use loopfill_core::metrics::{mean_std, psnr, ssim, ssim_with_grad, PSNR_CAP};
use loopfill_core::render::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::from_pixels(w, h, (0..w * h * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn perturbed(rng: &mut ChaCha8Rng, img: &Image, amount: f32) -> Image {
    let px = img.pixels.iter().map(|v| (v + amount * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0)).collect();
    Image::from_pixels(img.width, img.height, px).unwrap()
}

#[test]
fn uniform_tenth_error_is_twenty_decibels() {
    let a = Image::filled(32, 32, Vec3::new(0.5, 0.5, 0.5));
    let b = Image::filled(32, 32, Vec3::new(0.6, 0.6, 0.6));
    let p = psnr(&a, &b).unwrap();
    assert_eq!(format!("{p:.2}"), "20.00");
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
}

#[test]
fn ssim_of_identical_images_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let a = random_image(&mut rng, 24, 20);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn metrics_match_direct_oracles_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..100 {
        let (w, h) = (rng.random_range(11..24), rng.random_range(11..24));
        let a = random_image(&mut rng, w, h);
        let b = if i % 2 == 0 { random_image(&mut rng, w, h) } else { perturbed(&mut rng, &a, 0.2) };
        let (p, po) = (psnr(&a, &b).unwrap(), psnr_oracle(&a, &b));
        assert!((p - po).abs() < 1e-9, "psnr {p} vs {po}");
        let (s, so) = (ssim(&a, &b).unwrap(), ssim_oracle(&a, &b));
        assert!((s - so).abs() < 1e-9, "ssim {s} vs {so}");
    }
}

#[test]
fn ssim_is_symmetric_and_constant_patches_follow_the_luminance_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_image(&mut rng, 16, 16);
    let b = perturbed(&mut rng, &a, 0.3);
    assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);

    let (u, v) = (0.2f64, 0.7f64);
    let x = Image::filled(13, 13, Vec3::new(u, u, u));
    let y = Image::filled(13, 13, Vec3::new(v, v, v));
    let (u, v) = (u as f32 as f64, v as f32 as f64);
    let c1 = 1e-4;
    let expected = (2.0 * u * v + c1) / (u * u + v * v + c1);
    assert!((ssim(&x, &y).unwrap() - expected).abs() < 1e-6);
}

#[test]
fn ssim_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_image(&mut rng, 13, 12);
    let b = perturbed(&mut rng, &a, 0.4);
    let (_, grad) = ssim_with_grad(&a, &b).unwrap();
    let eval = |vals: &[f64]| -> f64 {
        let img = Image::from_f64(13, 12, vals);
        ssim(&img, &b).unwrap()
    };
    let base: Vec<f64> = a.to_f64();
    for _ in 0..20 {
        let k = rng.random_range(0..base.len());
        let h = 1e-3;
        let mut p = base.clone();
        p[k] += h;
        let mut m = base.clone();
        m[k] -= h;
        let fd = (eval(&p) - eval(&m)) / (2.0 * h);
        assert!((fd - grad[k]).abs() < 1e-4 + 1e-2 * fd.abs(), "index {k}: fd {fd} analytic {}", grad[k]);
    }
}

#[test]
fn mean_std_is_population_statistics() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - 1.25f64.sqrt()).abs() < 1e-15);
    assert!(mean_std(&[]).0.is_nan());
}
