#![allow(dead_code)]

use loopfill_core::camera::{make_rig, CameraPose, RigSpec};
use loopfill_core::geometry::{GaussianCloud, Splat};
use loopfill_core::math::{Quat, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_scene(seed: u64, n: usize) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::new();
    for _ in 0..n {
        let q = Quat(std::array::from_fn(|_| rng.random_range(-1.0..1.0))).normalized();
        cloud.push(Splat {
            mean: Vec3(std::array::from_fn(|_| rng.random_range(-0.6..0.6))),
            rotation: q,
            scale: Vec3(std::array::from_fn(|_| rng.random_range(0.08..0.35))),
            opacity: rng.random_range(0.2..0.9),
            color: Vec3(std::array::from_fn(|_| rng.random_range(0.0..1.0))),
        });
    }
    cloud
}

pub fn random_pose(seed: u64, size: usize) -> CameraPose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let spec = RigSpec {
        n_views: 1,
        width: size,
        height: size,
        azimuth_offset_deg: rng.random_range(0.0..360.0),
        elevation_deg: rng.random_range(-30.0..60.0),
        ..RigSpec::default()
    };
    make_rig(&spec).unwrap()[0]
}

pub fn random_upstream(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}
