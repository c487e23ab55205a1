use loopfill_core::camera::{make_rig, RigSpec};
use loopfill_core::eval::consistency_score;
use loopfill_core::geometry::{generate_object, point_in_mask, GaussianCloud, Splat};
use loopfill_core::math::{Quat, Vec3};
use loopfill_core::recon::{
    fit, init_cloud, random_cloud, recon_loss, reconstruct, InitMode, ReconConfig,
};
use loopfill_core::render::{render, Image, RenderSettings};
use loopfill_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> Image {
    Image::from_pixels(side, side, (0..side * side * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn rig(views: usize, side: usize) -> Vec<loopfill_core::camera::CameraPose> {
    make_rig(&RigSpec { n_views: views, width: side, height: side, ..RigSpec::default() }).unwrap()
}

fn small_scene() -> GaussianCloud {
    GaussianCloud::from_splats((0..6).map(|i| {
        let a = i as f64 * 1.1;
        Splat {
            mean: Vec3::new(0.4 * a.cos(), 0.4 * a.sin(), 0.1 * (i as f64 - 2.5)),
            rotation: Quat::IDENTITY,
            scale: Vec3::new(0.18, 0.12, 0.15),
            opacity: 0.8,
            color: Vec3::new(0.1 + 0.15 * i as f64, 0.8 - 0.1 * i as f64, 0.4),
        }
    }))
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = random_image(&mut rng, 14);
    let t = random_image(&mut rng, 14);
    let (_, grad) = recon_loss(&r, &t, 0.2).unwrap();
    let base = r.to_f64();
    let h = 1e-3;
    let mut checked = 0;
    while checked < 25 {
        let k = rng.random_range(0..base.len());
        if (base[k] - t.pixels[k] as f64).abs() < 4.0 * h {
            continue;
        }
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[k] += delta;
            recon_loss(&Image::from_f64(14, 14, &v), &t, 0.2).unwrap().0
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = (fd - grad[k]).abs() / grad[k].abs().max(1e-12);
        assert!(rel < 1e-3, "index {k}: fd {fd} analytic {} rel {rel}", grad[k]);
        checked += 1;
    }
}

#[test]
fn loss_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = random_image(&mut rng, 16);
    let (l, g) = recon_loss(&a, &a, 0.2).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.iter().all(|v| v.abs() < 1e-12));

    let x = Image::filled(16, 16, Vec3::new(0.25, 0.25, 0.25));
    let y = Image::filled(16, 16, Vec3::new(0.35, 0.35, 0.35));
    let (l, _) = recon_loss(&x, &y, 0.0).unwrap();
    assert!((l - 0.1).abs() < 1e-7);
    assert!(recon_loss(&x, &Image::filled(8, 8, Vec3::ZERO), 0.0).is_err());
}

#[test]
fn init_places_new_splats_inside_the_mask() {
    let obj = generate_object(3, 48).unwrap();
    let carved = GaussianCloud::from_splats(obj.full.splats().filter(|s| !point_in_mask(s.mean, &obj.mask)));
    let init = init_cloud(&carved, &obj.mask, carved.len() + 40, 5).unwrap();
    assert_eq!(init.len(), carved.len() + 40);
    for i in 0..carved.len() {
        assert_eq!(init.splat(i), carved.splat(i));
    }
    for i in carved.len()..init.len() {
        assert!(point_in_mask(init.means[i], &obj.mask));
    }
    init.validate().unwrap();
    assert!(init_cloud(&carved, &obj.mask, carved.len().saturating_sub(1), 5).is_err() || carved.is_empty());
}

#[test]
fn fit_is_deterministic_keeps_invariants_and_never_touches_frames() {
    let poses = rig(4, 24);
    let frames: Vec<Image> = poses.iter().map(|p| render(&small_scene(), p, &RenderSettings::default())).collect();
    let before = frames.clone();
    let cfg = ReconConfig { iterations: 60, init: InitMode::Random, new_splats: 10, seed: 4, ..ReconConfig::default() };
    let a = fit(&frames, &poses, None, random_cloud(10, 4), &cfg).unwrap();
    let b = fit(&frames, &poses, None, random_cloud(10, 4), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(frames, before);
    assert_eq!(a.losses.len(), 60);
    for q in &a.cloud.rotations {
        assert!((q.norm() - 1.0).abs() < 1e-6);
    }
    a.cloud.validate().unwrap();

    let zero = ReconConfig { iterations: 0, ..cfg };
    let init = random_cloud(10, 4);
    assert_eq!(fit(&frames, &poses, None, init.clone(), &zero).unwrap().cloud, init);
    assert!(fit(&frames[..3], &poses, None, init, &cfg).is_err());
}

#[test]
fn consistent_inputs_fit_better_than_corrupted_ones() {
    let poses = rig(6, 24);
    let settings = RenderSettings::default();
    let clean: Vec<Image> = poses.iter().map(|p| render(&small_scene(), p, &settings)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let corrupted: Vec<Image> = clean
        .iter()
        .map(|f| {
            let shift = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
            let px = f.pixels.chunks(3).flat_map(|p| (0..3).map(move |c| (p[c] as f64 + shift[c]).clamp(0.0, 1.0) as f32)).collect();
            Image::from_pixels(f.width, f.height, px).unwrap()
        })
        .collect();
    let cfg = ReconConfig { iterations: 300, init: InitMode::Random, new_splats: 24, seed: 9, ..ReconConfig::default() };
    let empty = GaussianCloud::new();
    let obj = generate_object(1, 16).unwrap();
    let tail = |r: &loopfill_core::recon::ReconResult| r.losses[240..].iter().sum::<f64>() / 60.0;
    let good = reconstruct(&clean, &poses, &empty, &obj.mask, &cfg).unwrap();
    let bad = reconstruct(&corrupted, &poses, &empty, &obj.mask, &cfg).unwrap();
    assert!(tail(&good) < tail(&bad), "{} vs {}", tail(&good), tail(&bad));
}

#[test]
fn consistency_score_prefers_consistent_views() {
    let poses = rig(8, 24);
    let settings = RenderSettings::default();
    let clean: Vec<Image> = poses.iter().map(|p| render(&small_scene(), p, &settings)).collect();
    let mut noisy = clean.clone();
    for (k, f) in noisy.iter_mut().enumerate().filter(|(k, _)| k % 2 == 1) {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        f.pixels.iter_mut().for_each(|v| *v = (*v + rng.random_range(-0.4..0.4f32)).clamp(0.0, 1.0));
    }
    let a = consistency_score(&clean, &poses, 24, 1).unwrap();
    let b = consistency_score(&noisy, &poses, 24, 1).unwrap();
    assert!(a > b, "{a} vs {b}");
    assert!(matches!(consistency_score(&clean[..3], &poses[..3], 24, 1), Err(Error::Parameter(_))));
}
