use std::path::Path;

use loopfill::bundle::{make_manifest, pose_to_transform, read_bundle, write_bundle, Bundle, CameraManifest};
use loopfill::checkpoint::{self, decode_adapters, decode_base, encode_adapters, encode_base};
use loopfill::config::PipelineConfig;
use loopfill::error::PipelineError;
use loopfill::image_io::{self, decode_raw, encode_raw, RAW_HEADER_BYTES};
use loopfill::ply::{self, RECORD_BYTES};
use loopfill_core::camera::{make_rig, RigSpec};
use loopfill_core::geometry::{carve_object, generate_object, GaussianCloud};
use loopfill_core::model::{Denoiser, DenoiserConfig, LoraAdapters};
use loopfill_core::render::{Image, MaskImage, RenderSettings};
use loopfill_core::sequence::render_sequence;
use loopfill_core::Error as CoreError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro() -> DenoiserConfig {
    DenoiserConfig { frame_size: 8, max_frames: 3, base_channels: 8, num_blocks: 1, time_embed_dim: 4, patch_size: 4, ..DenoiserConfig::default() }
}

#[test]
fn ply_round_trip_is_lossless_at_f32() {
    let obj = generate_object(4, 40).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ply");
    ply::write_ply(&obj.full, &path).unwrap();
    let back = ply::read_ply(&path).unwrap();
    assert_eq!(back.len(), obj.full.len());
    for (a, b) in back.splats().zip(obj.full.splats()) {
        for k in 0..3 {
            assert_eq!(a.mean[k], b.mean[k] as f32 as f64);
            assert_eq!(a.scale[k], b.scale[k] as f32 as f64);
            assert_eq!(a.color[k], b.color[k] as f32 as f64);
        }
        assert_eq!(a.opacity, b.opacity as f32 as f64);
    }
    ply::write_ply(&back, &path).unwrap();
    assert_eq!(ply::read_ply(&path).unwrap(), back);
}

#[test]
fn ply_sizes_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("e.ply");
    ply::write_ply(&GaussianCloud::new(), &empty).unwrap();
    assert!(ply::read_ply(&empty).unwrap().is_empty());

    let obj = generate_object(5, 64).unwrap();
    let mut big = GaussianCloud::new();
    while big.len() < 10_000 {
        big.extend(&obj.full);
    }
    let big = big.select(&(0..10_000).collect::<Vec<_>>());
    let bytes = ply::encode(&big);
    assert_eq!(bytes.len(), ply::header(10_000).len() + 10_000 * RECORD_BYTES);

    let truncated = &bytes[..bytes.len() - 3];
    assert!(matches!(ply::decode(truncated, Path::new("t.ply")), Err(PipelineError::Format { .. })));
    let missing = dir.path().join("missing.ply");
    let err = ply::read_ply(&missing).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn raw_images_round_trip_bit_exactly_and_png_to_eight_bits() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = Image::from_pixels(7, 5, (0..105).map(|_| rng.random::<f32>()).collect()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("a.f32");
    image_io::write_raw(&img, &raw).unwrap();
    assert_eq!(image_io::read_raw(&raw).unwrap(), img);
    let bytes = std::fs::read(&raw).unwrap();
    assert_eq!(bytes.len(), RAW_HEADER_BYTES + 105 * 4);
    // planar: the first plane holds every red value
    let (w, h, c, _) = decode_raw(&bytes, &raw).unwrap();
    assert_eq!((w, h, c), (7, 5, 3));
    let first = f32::from_le_bytes(bytes[RAW_HEADER_BYTES + 4..RAW_HEADER_BYTES + 8].try_into().unwrap());
    assert_eq!(first, img.pixels[3]);
    assert!(decode_raw(&encode_raw(2, 2, 3, &[0.0; 12])[..30], &raw).is_err());

    let png = dir.path().join("a.png");
    image_io::write_png(&img, &png).unwrap();
    let back = image_io::read_png(&png).unwrap();
    for (a, b) in back.pixels.iter().zip(&img.pixels) {
        assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
    }
    let mask = MaskImage::from_values(4, 3, vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
    let mp = dir.path().join("m.png");
    image_io::write_mask_png(&mask, &mp).unwrap();
    assert_eq!(image_io::read_mask_png(&mp).unwrap(), mask);
}

#[test]
fn manifest_poses_round_trip() {
    let poses = make_rig(&RigSpec { n_views: 8, width: 32, height: 32, ..RigSpec::default() }).unwrap();
    let m = make_manifest(&poses, (false, false), 1, 99).unwrap();
    let text = serde_json::to_string(&m).unwrap();
    let back: CameraManifest = serde_json::from_str(&text).unwrap();
    for (a, b) in back.poses().unwrap().iter().zip(&poses) {
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.rotation.0[i][j] - b.rotation.0[i][j]).abs() < 1e-12);
            }
            assert!((a.translation[i] - b.translation[i]).abs() < 1e-12);
        }
    }
    // OpenGL convention: the camera looks down its local -z, towards the origin
    let t = pose_to_transform(&poses[0]);
    let c = [t[0][3], t[1][3], t[2][3]];
    let back_axis = [t[0][2], t[1][2], t[2][2]];
    let dot: f64 = c.iter().zip(&back_axis).map(|(a, b)| a * b).sum();
    assert!(dot > 0.0);
}

#[test]
fn bundles_round_trip() {
    let obj = generate_object(8, 24).unwrap();
    let carved = carve_object(&obj).unwrap();
    let rig = make_rig(&RigSpec { n_views: 4, width: 16, height: 16, ..RigSpec::default() }).unwrap();
    let (sequence, targets) = render_sequence(&obj.full, &carved, &obj.mask, &rig, &RenderSettings::default(), obj.label).unwrap();
    let b = Bundle { sample: obj, carved, sequence, targets };
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&b, dir.path()).unwrap();
    let back = read_bundle(dir.path()).unwrap();
    assert_eq!(back.sequence.frames, b.sequence.frames);
    assert_eq!(back.sequence.masks, b.sequence.masks);
    assert_eq!(back.targets, b.targets);
    assert_eq!(back.sample.mask, b.sample.mask);
    assert_eq!(back.carved.len(), b.carved.len());
}

#[test]
fn checkpoints_round_trip_and_reject_damage() {
    let model = Denoiser::new(micro(), 3).unwrap();
    let bytes = encode_base(&model);
    let p = Path::new("m.ckpt");
    let back = decode_base(&bytes, p).unwrap();
    assert_eq!(back.params().flatten(), model.params().flatten().iter().map(|v| *v as f32 as f64).collect::<Vec<_>>());

    let err = decode_base(&bytes[..bytes.len() - 4], p).unwrap_err();
    assert!(matches!(err, PipelineError::Format { .. }));
    assert_eq!(err.exit_code(), 3);
    assert!(decode_base(b"NOTACKPT........", p).is_err());

    let adapters = LoraAdapters::new(&model, 2, 0.5, 1).unwrap();
    let abytes = encode_adapters(&adapters, &model);
    let aback = decode_adapters(&abytes, p, &model).unwrap();
    assert_eq!((aback.rank, aback.scale), (2, 0.5));
    assert_eq!(aback.base_fingerprint, adapters.base_fingerprint);

    let other = Denoiser::new(DenoiserConfig { base_channels: 12, ..micro() }, 3).unwrap();
    let err = decode_adapters(&abytes, p, &other).unwrap_err();
    assert!(matches!(err, PipelineError::Core(CoreError::Compatibility(_))));
    assert!(decode_base(&abytes, p).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.ckpt");
    checkpoint::save_base(&model, &path).unwrap();
    assert_eq!(checkpoint::file_hash(&path).unwrap().len(), 64);
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    let err = PipelineConfig::from_toml("seed = 1\nbogus = 2\n").unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = PipelineConfig::from_toml("[data]\nviews = 5\n").unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let cfg = PipelineConfig::from_toml("seed = 3\n").unwrap();
    assert_eq!(cfg.seed, 3);
    let again = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(again, cfg);
    let tiny = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.toml")).unwrap();
    PipelineConfig::from_toml(&tiny).unwrap();
}
