use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn loopfill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loopfill")).args(args).env_remove("LOOPFILL_OUT").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = std::fs::read_to_string(tiny_config()).unwrap();
    let path = dir.join("cfg.toml");
    std::fs::write(&path, format!("{extra}\n{text}")).unwrap();
    path
}

#[test]
fn bad_usage_and_bad_config_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&loopfill(&["gen-data"])), 2);
    assert_eq!(code(&loopfill(&["no-such-command"])), 2);
    assert_eq!(code(&loopfill(&["--help"])), 0);

    let missing = dir.path().join("absent.toml");
    assert_eq!(code(&loopfill(&["gen-data", "--config", missing.to_str().unwrap()])), 2);

    let bad = write_config(dir.path(), "surprise = true");
    let out = loopfill(&["gen-data", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = tiny_config();
    let out = loopfill(&["gen-data", "--config", cfg.to_str().unwrap(), "--threads", "0"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_artifacts_exit_with_configuration_or_data_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    // no base checkpoint yet
    assert_eq!(code(&loopfill(&["train-lora", "--config", cfg.to_str().unwrap(), "--out", run_s])), 2);
    // no arc bundles yet
    assert_eq!(code(&loopfill(&["pretrain-base", "--config", cfg.to_str().unwrap(), "--out", run_s])), 3);
    let junk = dir.path().join("junk");
    std::fs::create_dir_all(&junk).unwrap();
    std::fs::write(junk.join("manifest.json"), "{ not json").unwrap();
    let out = loopfill(&["reconstruct", "--config", cfg.to_str().unwrap(), "--out", run_s, "--frames", junk.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
}

#[test]
fn divergence_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    assert_eq!(code(&loopfill(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", run_s])), 0);
    let text = std::fs::read_to_string(&cfg).unwrap().replace("[pretrain]\n", "[pretrain]\ndivergence_loss = 1e-9\n");
    let diverging = dir.path().join("diverge.toml");
    std::fs::write(&diverging, text).unwrap();
    let out = loopfill(&["pretrain-base", "--config", diverging.to_str().unwrap(), "--out", run_s]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("base/last_good.ckpt").is_file());
}

#[test]
fn stages_run_individually_and_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let c = cfg.to_str().unwrap();
    let run = dir.path().join("run");
    let r = run.to_str().unwrap();
    for stage in ["gen-data", "pretrain-base", "train-lora"] {
        let out = loopfill(&[stage, "--config", c, "--out", r]);
        assert_eq!(code(&out), 0, "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let bundle = run.join("data/heldout/obj_0000");
    let reference = bundle.join("targets/000.png");
    let out = loopfill(&["inpaint", "--config", c, "--out", r, "--bundle", bundle.to_str().unwrap(), "--reference", reference.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let inpainted = run.join("inpaint/obj_0000");
    let prov = std::fs::read_to_string(inpainted.join("provenance.json")).unwrap();
    assert!(prov.contains("\"guidance\"") && prov.contains("targets/000.png"));
    assert!(inpainted.join("frames/003.png").is_file() && inpainted.join("frames/003.f32").is_file());

    let out = loopfill(&["reconstruct", "--config", c, "--out", r, "--frames", inpainted.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let recon = run.join("recon/obj_0000");
    assert!(recon.join("cloud.ply").is_file());
    let loss = std::fs::read_to_string(recon.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step,loss,lr"));
    assert_eq!(loss.lines().count(), 31);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(recon.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["per_view_psnr"].as_array().unwrap().len(), 4);
    assert!(report["wall_clock_s"].as_f64().is_some());

    let base_loss = std::fs::read_to_string(run.join("base/loss.csv")).unwrap();
    assert_eq!(base_loss.lines().count(), 1 + 4);
    assert!(run.join("lora/ablation.json").is_file());

    let out = loopfill(&["eval", "--config", c, "--out", r]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(run.join("eval/metrics.csv")).unwrap();
    assert!(metrics.starts_with("variant,views,seed,label,mask_variant,psnr,ssim,consistency_psnr"));
    assert_eq!(metrics.lines().count(), 1 + 2 * 4);
}

#[test]
fn volume_only_mix_and_byte_identical_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("validation_objects = 2\n", "validation_objects = 2\nmask_mix = [\"volume\"]\n");
    std::fs::write(&cfg, text).unwrap();
    let c = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for run in [&a, &b] {
        let out = loopfill(&["gen-data", "--config", c, "--out", run.to_str().unwrap(), "--seed", "11"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let index: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("data/index.json")).unwrap()).unwrap();
    for entry in index["bundles"].as_array().unwrap() {
        assert_eq!(entry["variant"], "volume");
    }
    for rel in ["data/index.json", "data/heldout/obj_0001/full.ply", "data/orbit/obj_0002/frames/003.png"] {
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}
