mod common;

use common::scenes::{random_pose, random_scene, random_upstream};
use common::splat_oracle;
use loopfill_core::camera::{make_rig, project, RigSpec};
use loopfill_core::geometry::{GaussianCloud, Mask3D, MaskVariant, Primitive, Splat};
use loopfill_core::math::{Quat, Vec3};
use loopfill_core::render::{
    composite_ray, render, render_alpha, render_backward, render_mask, RayContribution, RenderSettings,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn flatten(g: &loopfill_core::render::RenderGradients, i: usize) -> [f64; 14] {
    let mut out = [0.0; 14];
    out[0..3].copy_from_slice(&g.means[i].0);
    out[3..7].copy_from_slice(&g.rotations[i]);
    out[7..10].copy_from_slice(&g.scales[i].0);
    out[10] = g.opacities[i];
    out[11..14].copy_from_slice(&g.colors[i].0);
    out
}

#[test]
fn empty_cloud_renders_background() {
    let pose = random_pose(1, 16);
    let img = render(&GaussianCloud::new(), &pose, &RenderSettings::default());
    assert!(img.pixels.iter().all(|v| *v == 1.0));
    let teal = Vec3::new(0.1, 0.6, 0.6);
    let img = render(&GaussianCloud::new(), &pose, &RenderSettings::with_background(teal));
    for px in img.pixels.chunks(3) {
        assert_eq!(px, [0.1f32, 0.6, 0.6]);
    }
}

#[test]
fn centered_splat_peaks_at_image_center() {
    let pose = make_rig(&RigSpec { n_views: 3, width: 32, height: 32, ..RigSpec::default() }).unwrap()[1];
    let cloud = GaussianCloud::from_splats([Splat {
        mean: Vec3::ZERO,
        rotation: Quat::IDENTITY,
        scale: Vec3::new(0.2, 0.2, 0.2),
        opacity: 0.9,
        color: Vec3::ZERO,
    }]);
    let alpha = render_alpha(&cloud, &pose, &RenderSettings::default());
    let (argmax, _) = alpha.iter().enumerate().fold((0, f64::MIN), |b, (i, a)| if *a > b.1 { (i, *a) } else { b });
    let (x, y) = (argmax % 32, argmax / 32);
    assert!((15..=16).contains(&x) && (15..=16).contains(&y), "peak at {x},{y}");
}

#[test]
fn composite_matches_literal_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let mut contribs: Vec<RayContribution> = (0..5)
            .map(|_| RayContribution {
                color: Vec3(std::array::from_fn(|_| rng.random_range(0.0..1.0))),
                opacity: rng.random_range(0.01..0.99),
                footprint: rng.random_range(0.0..1.0),
                depth: rng.random_range(0.0..10.0),
            })
            .collect();
        contribs.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap());
        let out = composite_ray(&contribs);
        let mut want = [0.0; 3];
        for i in 0..contribs.len() {
            let t: f64 = contribs[..i].iter().map(|c| 1.0 - c.opacity * c.footprint).product();
            for c in 0..3 {
                want[c] += contribs[i].color[c] * contribs[i].opacity * contribs[i].footprint * t;
            }
        }
        let t_all: f64 = contribs.iter().map(|c| 1.0 - c.opacity * c.footprint).product();
        for c in 0..3 {
            assert!((out.color[c] - want[c]).abs() < 1e-12);
        }
        assert!((out.transmittance - t_all).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&out.transmittance));
        let weights: f64 = (0..contribs.len())
            .map(|i| {
                let t: f64 = contribs[..i].iter().map(|c| 1.0 - c.opacity * c.footprint).product();
                contribs[i].opacity * contribs[i].footprint * t
            })
            .sum();
        assert!((weights - (1.0 - out.transmittance)).abs() < 1e-12);
    }
}

#[test]
fn tiled_renderer_matches_brute_force() {
    for seed in 0..20u64 {
        let cloud = random_scene(seed, 3);
        let pose = random_pose(seed, 16);
        let settings = RenderSettings::default();
        let img = render(&cloud, &pose, &settings);
        let (want, _) = splat_oracle::render(&cloud, &pose, &settings, None);
        for (a, b) in img.pixels.iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-6, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn render_is_invariant_to_input_order() {
    let cloud = random_scene(9, 10);
    let pose = random_pose(9, 32);
    let mut order: Vec<usize> = (0..10).collect();
    order.reverse();
    order.swap(2, 7);
    let shuffled = cloud.select(&order);
    let a = render(&cloud, &pose, &RenderSettings::default());
    let b = render(&shuffled, &pose, &RenderSettings::default());
    assert_eq!(a, b);
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let cloud = random_scene(3, 6);
    let pose = random_pose(3, 16);
    let g = render_backward(&cloud, &pose, &RenderSettings::default(), &vec![0.0; 16 * 16 * 3]).unwrap();
    assert!(g.means.iter().all(|v| *v == Vec3::ZERO));
    assert!(g.rotations.iter().flatten().all(|v| *v == 0.0));
    assert!(g.opacities.iter().all(|v| *v == 0.0));
}

#[test]
fn non_finite_upstream_is_rejected() {
    let cloud = random_scene(3, 2);
    let pose = random_pose(3, 16);
    let mut up = vec![0.0; 16 * 16 * 3];
    up[5] = f64::NAN;
    assert!(render_backward(&cloud, &pose, &RenderSettings::default(), &up).is_err());
}

fn check_gradients(seed: u64, n: usize) -> f64 {
    let cloud = random_scene(seed, n);
    let pose = random_pose(seed, 16);
    let settings = RenderSettings::default();
    let upstream = random_upstream(seed, 16 * 16 * 3);
    let analytic = render_backward(&cloud, &pose, &settings, &upstream).unwrap();
    let numeric = splat_oracle::finite_difference_gradients(&cloud, &pose, &settings, &upstream, 1e-4);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let a = flatten(&analytic, i);
        for p in 0..14 {
            worst = worst.max(splat_oracle::relative_error(a[p], numeric[i][p], 1e-6));
        }
    }
    worst
}

#[test]
fn single_splat_gradients_match_finite_differences() {
    for seed in 100..110 {
        let err = check_gradients(seed, 1);
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn ten_splat_gradients_match_finite_differences() {
    for seed in 200..205 {
        let err = check_gradients(seed, 10);
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn mask_of_primitive_behind_camera_is_empty() {
    let pose = make_rig(&RigSpec::default()).unwrap()[0];
    let behind = pose.position() * 1.9;
    let mask = Mask3D {
        variant: MaskVariant::ConvexHull,
        primitives: vec![Primitive::Sphere { center: behind, radius: 0.5 }],
    };
    assert!(render_mask(&mask, &pose).is_all_zero());
}

#[test]
fn sphere_mask_matches_projected_radius() {
    let pose = make_rig(&RigSpec { width: 64, height: 64, ..RigSpec::default() }).unwrap()[0];
    let mask = Mask3D::new(MaskVariant::ConvexHull, vec![Primitive::Sphere { center: Vec3::ZERO, radius: 0.5 }]).unwrap();
    let m = render_mask(&mask, &pose);
    assert!(m.values.iter().all(|v| *v == 0.0 || *v == 1.0));
    let d = 2.7f64;
    let want = pose.focal() * 0.5 / (d * d - 0.25).sqrt();
    let (cx, cy) = pose.principal_point();
    let mut max_r: f64 = 0.0;
    for y in 0..64 {
        for x in 0..64 {
            if m.values[y * 64 + x] == 1.0 {
                let r = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                max_r = max_r.max(r);
            }
        }
    }
    assert!((max_r - want).abs() <= 1.0, "{max_r} vs {want}");
    let centre = project(Vec3::ZERO, &pose);
    assert_eq!(m.values[(centre.v as usize) * 64 + centre.u as usize], 1.0);
}
