//! Pipeline stages. Each command reads its inputs from the run directory,
//! writes its outputs plus a frozen config and provenance next to them, and
//! is a pure function of (config, inputs, seed) at a fixed thread count.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use loopfill_core::camera::{make_arc, make_rig};
use loopfill_core::eval::{evaluate_run, view_sweep, EvalVariant, Inpainter, MetricReport};
use loopfill_core::geometry::{carve_object_with, generate_object_with_variant, CarveOptions, Mask3D, ObjectSample};
use loopfill_core::model::{
    pretrain_base, sample, train_lora, validation_loss, Adapted, Denoiser, LoraAdapters, LossRecord, SampleConfig,
    TrainConfig, TrainingPair,
};
use loopfill_core::par;
use loopfill_core::recon::{per_view_psnr, reconstruct, ReconConfig};
use loopfill_core::render::RenderSettings;
use loopfill_core::sequence::{
    attach_reference, close_loop, close_loop_images, composite_known, detach_reference, open_loop, render_sequence,
};
use loopfill_core::Error as CoreError;

use crate::bundle::{self, read_json, write_json, Bundle};
use crate::checkpoint;
use crate::config::PipelineConfig;
use crate::error::{IoContext, PipelineError, Result};
use crate::ply;
use crate::report;

/// Locations of every artifact inside a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn split(&self, split: Split) -> PathBuf {
        self.data().join(split.as_str())
    }

    pub fn base_dir(&self) -> PathBuf {
        self.root.join("base")
    }

    pub fn base_ckpt(&self) -> PathBuf {
        self.base_dir().join("base.ckpt")
    }

    pub fn lora_dir(&self) -> PathBuf {
        self.root.join("lora")
    }

    pub fn lora_ckpt(&self) -> PathBuf {
        self.lora_dir().join("adapters.ckpt")
    }

    pub fn inpaint(&self) -> PathBuf {
        self.root.join("inpaint")
    }

    pub fn recon(&self) -> PathBuf {
        self.root.join("recon")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Arc,
    Orbit,
    Validation,
    Heldout,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Arc, Split::Orbit, Split::Validation, Split::Heldout];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Arc => "arc",
            Split::Orbit => "orbit",
            Split::Validation => "validation",
            Split::Heldout => "heldout",
        }
    }

    fn count(self, cfg: &PipelineConfig) -> usize {
        match self {
            Split::Arc => cfg.data.arc_objects,
            Split::Orbit => cfg.data.orbit_objects,
            Split::Validation => cfg.data.validation_objects,
            Split::Heldout => cfg.data.heldout_objects,
        }
    }
}

/// Object seed for item `i` of a split; splits never share seeds.
pub fn object_seed(seed: u64, split: Split, i: usize) -> u64 {
    let tag = split as u64 + 1;
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (tag << 40) ^ i as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub split: Split,
    pub name: String,
    pub seed: u64,
    pub label: usize,
    pub variant: String,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataIndex {
    pub bundles: Vec<IndexEntry>,
}

/// Builds one bundle: arc bundles sweep a partial forward-facing arc, all
/// other splits use the full orbit without loop closure.
pub fn make_bundle(cfg: &PipelineConfig, split: Split, i: usize) -> Result<Bundle> {
    let d = &cfg.data;
    let seed = object_seed(cfg.seed, split, i);
    let variant = d.mask_mix[i % d.mask_mix.len()];
    let sample = generate_object_with_variant(seed, d.complexity, variant)?;
    let carved = carve_object_with(&sample, CarveOptions { keep_fraction_floor: Some(0.0) })?;
    let rig = match split {
        Split::Arc => {
            let start = (seed % 3600) as f64 / 10.0;
            make_arc(&d.rig(d.arc_frames), start, d.arc_degrees)?
        }
        _ => make_rig(&d.rig(d.views))?,
    };
    let (sequence, targets) =
        render_sequence(&sample.full, &carved, &sample.mask, &rig, &RenderSettings::default(), sample.label)?;
    Ok(Bundle { sample, carved, sequence, targets })
}

fn bundle_name(i: usize) -> String {
    format!("obj_{i:04}")
}

pub fn cmd_gen_data(cfg: &PipelineConfig) -> Result<DataIndex> {
    let paths = RunPaths::new(&cfg.out);
    let data = paths.data();
    fs::create_dir_all(&data).at(&data)?;
    cfg.freeze(&data)?;
    let mut entries = Vec::new();
    for split in Split::ALL {
        let n = split.count(cfg);
        let dir = paths.split(split);
        let results = par::map(n, |i| -> Result<IndexEntry> {
            let b = make_bundle(cfg, split, i)?;
            let name = bundle_name(i);
            bundle::write_bundle(&b, &dir.join(&name))?;
            Ok(IndexEntry {
                split,
                name,
                seed: b.sample.seed,
                label: b.sample.label,
                variant: b.sample.mask.variant.as_str().to_string(),
                frames: b.sequence.len(),
            })
        });
        for r in results {
            entries.push(r?);
        }
    }
    let index = DataIndex { bundles: entries };
    write_json(&index, &data.join("index.json"))?;
    Ok(index)
}

/// Training pairs from every bundle of a split. Orbits are loop-closed and
/// may be rotated during training; arcs are used as-is.
pub fn load_pairs(cfg: &PipelineConfig, split: Split) -> Result<Vec<TrainingPair>> {
    let dir = RunPaths::new(&cfg.out).split(split);
    if !dir.is_dir() {
        return Err(PipelineError::Missing { path: dir, what: format!("{} bundles; run gen-data first", split.as_str()) });
    }
    let dirs = bundle::list_bundles(&dir)?;
    if dirs.is_empty() {
        return Err(PipelineError::Missing { path: dir, what: "no bundles".into() });
    }
    let pairs = par::map(dirs.len(), |i| -> Result<TrainingPair> {
        let b = bundle::read_bundle(&dirs[i])?;
        if split == Split::Arc {
            Ok(TrainingPair::from_sequence(&b.sequence, &b.targets)?)
        } else {
            let closed = close_loop(&b.sequence)?;
            Ok(TrainingPair::from_sequence(&closed, &close_loop_images(&b.targets))?)
        }
    });
    pairs.into_iter().collect()
}

fn seeded(train: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed: seed ^ train.seed, ..*train }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub seed: u64,
    pub threads: usize,
    pub checkpoints: Vec<(String, String)>,
    pub settings: serde_json::Value,
}

fn write_provenance(dir: &Path, command: &str, cfg: &PipelineConfig, checkpoints: &[&Path], settings: serde_json::Value) -> Result<()> {
    let checkpoints = checkpoints
        .iter()
        .map(|p| Ok((p.display().to_string(), checkpoint::file_hash(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let prov = Provenance { command: command.into(), seed: cfg.seed, threads: cfg.threads, checkpoints, settings };
    write_json(&prov, &dir.join("provenance.json"))
}

fn save_diverged(err: PipelineError, dir: &Path, base: Option<&Denoiser>) -> PipelineError {
    if let PipelineError::Core(CoreError::Diverged { last_good: Some(cp), .. }) = &err {
        let path = dir.join("last_good.ckpt");
        let _ = match (&**cp, base) {
            (loopfill_core::error::Checkpoint::Base(m), _) => checkpoint::save_base(m, &path),
            (loopfill_core::error::Checkpoint::Adapters(a), Some(b)) => checkpoint::save_adapters(a, b, &path),
            (loopfill_core::error::Checkpoint::Cloud(c), _) => ply::write_ply(c, &path.with_extension("ply")),
            _ => Ok(()),
        };
    }
    err
}

pub fn cmd_pretrain_base(cfg: &PipelineConfig) -> Result<Vec<LossRecord>> {
    let paths = RunPaths::new(&cfg.out);
    let dir = paths.base_dir();
    fs::create_dir_all(&dir).at(&dir)?;
    cfg.freeze(&dir)?;
    let data = load_pairs(cfg, Split::Arc)?;
    let mut model = Denoiser::new(cfg.denoiser, cfg.seed)?;
    let train = seeded(&cfg.pretrain, cfg.seed);
    let curve = pretrain_base(&mut model, &data, &train).map_err(|e| save_diverged(e.into(), &dir, None))?;
    checkpoint::save_base(&model, &paths.base_ckpt())?;
    report::write_loss_csv(&curve, &dir.join("loss.csv"))?;
    write_provenance(&dir, "pretrain-base", cfg, &[], serde_json::json!({ "train": train, "items": data.len() }))?;
    Ok(curve)
}

pub fn load_base(cfg: &PipelineConfig) -> Result<Denoiser> {
    let path = RunPaths::new(&cfg.out).base_ckpt();
    if !path.is_file() {
        return Err(PipelineError::Config(format!("base checkpoint {} not found; run pretrain-base first", path.display())));
    }
    checkpoint::load_base(&path)
}

pub fn load_adapters(cfg: &PipelineConfig, base: &Denoiser) -> Result<LoraAdapters> {
    let path = RunPaths::new(&cfg.out).lora_ckpt();
    if !path.is_file() {
        return Err(PipelineError::Config(format!("adapter checkpoint {} not found; run train-lora first", path.display())));
    }
    checkpoint::load_adapters(&path, base)
}

/// Held-out flow-matching loss of the base alone and with adapters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub base_only_loss: f64,
    pub adapted_loss: f64,
    pub items: usize,
    pub draws: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraOutcome {
    pub curve: Vec<LossRecord>,
    pub ablation: Ablation,
    pub base_hash_before: [u8; 32],
    pub base_hash_after: [u8; 32],
}

pub fn cmd_train_lora(cfg: &PipelineConfig) -> Result<LoraOutcome> {
    let paths = RunPaths::new(&cfg.out);
    let base = load_base(cfg)?;
    let dir = paths.lora_dir();
    fs::create_dir_all(&dir).at(&dir)?;
    cfg.freeze(&dir)?;
    let data = load_pairs(cfg, Split::Orbit)?;
    let mut adapters = LoraAdapters::new(&base, cfg.lora.rank, cfg.lora.scale, cfg.seed ^ 0x10A4)?;
    let before = base.params().hash();
    let train = seeded(&cfg.lora.train, cfg.seed);
    let curve = train_lora(&base, &mut adapters, &data, &train).map_err(|e| save_diverged(e.into(), &dir, Some(&base)))?;
    let after = base.params().hash();

    let val = load_pairs(cfg, Split::Validation)?;
    let draws = cfg.lora.validation_draws;
    let vseed = cfg.seed ^ 0x5EED_0F_7A11;
    let ablation = Ablation {
        base_only_loss: validation_loss(&Adapted::base(&base), &val, draws, vseed)?,
        adapted_loss: validation_loss(&Adapted::with(&base, &adapters, 1.0), &val, draws, vseed)?,
        items: val.len(),
        draws,
    };
    checkpoint::save_adapters(&adapters, &base, &paths.lora_ckpt())?;
    report::write_loss_csv(&curve, &dir.join("loss.csv"))?;
    write_json(&ablation, &dir.join("ablation.json"))?;
    write_provenance(
        &dir,
        "train-lora",
        cfg,
        &[&paths.base_ckpt()],
        serde_json::json!({
            "train": train,
            "rank": cfg.lora.rank,
            "scale": cfg.lora.scale,
            "base_hash_before": hex::encode(before),
            "base_hash_after": hex::encode(after),
        }),
    )?;
    Ok(LoraOutcome { curve, ablation, base_hash_before: before, base_hash_after: after })
}

/// Sampling settings for one object: the configured settings with the seed
/// mixed with the run and object seeds.
pub fn object_sample_config(cfg: &PipelineConfig, object_seed: u64) -> SampleConfig {
    SampleConfig { seed: cfg.seed ^ cfg.sample.seed ^ object_seed.rotate_left(17), ..cfg.sample }
}

/// Inpaints one bundle and writes a reconstructable frames directory.
pub fn inpaint_bundle(
    cfg: &PipelineConfig,
    base: &Denoiser,
    adapters: &LoraAdapters,
    bundle_dir: &Path,
    reference: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let b = bundle::read_bundle(bundle_dir)?;
    if b.sequence.loop_closed || b.sequence.reference_attached {
        return Err(PipelineError::format(bundle_dir, "bundle must hold a plain orbit"));
    }
    let mut seq = close_loop(&b.sequence)?;
    if let Some(r) = reference {
        seq = attach_reference(&seq, &bundle::read_image(r)?)?;
    }
    let scfg = object_sample_config(cfg, b.sample.seed);
    let generated = sample(base, Some(adapters), &seq, &scfg)?;
    let mut generated_seq = seq.clone();
    generated_seq.frames = generated;
    if generated_seq.reference_attached {
        generated_seq = detach_reference(&generated_seq)?;
    }
    let generated_seq = open_loop(&generated_seq)?;
    let frames = composite_known(&generated_seq.frames, &b.sequence)?;

    fs::create_dir_all(out).at(out)?;
    let poses: Vec<_> = b.sequence.poses.iter().map(|p| p.expect("orbit frames have poses")).collect();
    write_json(&bundle::make_manifest(&poses, (false, false), b.sample.label, b.sample.seed)?, &out.join("manifest.json"))?;
    bundle::write_images(&frames, &out.join("frames"))?;
    bundle::write_masks(&b.sequence.masks, &out.join("masks"))?;
    ply::write_ply(&b.carved, &out.join("carved.ply"))?;
    write_json(&b.sample.mask, &out.join("mask.json"))?;
    cfg.freeze(out)?;
    let paths = RunPaths::new(&cfg.out);
    write_provenance(
        out,
        "inpaint",
        cfg,
        &[&paths.base_ckpt(), &paths.lora_ckpt()],
        serde_json::json!({
            "steps": scfg.steps,
            "guidance": scfg.guidance,
            "lora_scale": scfg.lora_scale,
            "seed": scfg.seed,
            "bundle": bundle_dir.display().to_string(),
            "reference": reference.map(|r| r.display().to_string()),
        }),
    )
}

/// Inpaints `bundle`, or every held-out bundle when `None`. Returns the output directories.
pub fn cmd_inpaint(cfg: &PipelineConfig, bundle_dir: Option<&Path>, reference: Option<&Path>) -> Result<Vec<PathBuf>> {
    let paths = RunPaths::new(&cfg.out);
    let base = load_base(cfg)?;
    let adapters = load_adapters(cfg, &base)?;
    let dirs = match bundle_dir {
        Some(d) => vec![d.to_path_buf()],
        None => bundle::list_bundles(&paths.split(Split::Heldout))?,
    };
    let outs: Vec<PathBuf> = dirs
        .iter()
        .map(|d| paths.inpaint().join(d.file_name().map(|n| n.to_owned()).unwrap_or_default()))
        .collect();
    let results = par::map(dirs.len(), |i| inpaint_bundle(cfg, &base, &adapters, &dirs[i], reference, &outs[i]));
    for r in results {
        r?;
    }
    Ok(outs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub final_loss: f64,
    pub iterations: usize,
    pub per_view_psnr: Vec<f64>,
    pub splats: usize,
    pub wall_clock_s: f64,
}

/// Fits a cloud to a frames directory written by `inpaint`.
pub fn reconstruct_dir(cfg: &PipelineConfig, frames_dir: &Path, out: &Path) -> Result<ReconReport> {
    let start = Instant::now();
    let manifest = bundle::read_manifest(frames_dir)?;
    let poses = manifest.poses()?;
    let frames = manifest
        .frames
        .iter()
        .map(|f| bundle::read_image(&frames_dir.join(&f.file_path)))
        .collect::<Result<Vec<_>>>()?;
    let carved = ply::read_ply(&frames_dir.join("carved.ply"))?;
    let mask: Mask3D = read_json(&frames_dir.join("mask.json"))?;
    let rcfg = ReconConfig { seed: cfg.seed ^ cfg.recon.seed ^ manifest.seed, ..cfg.recon };
    let result = reconstruct(&frames, &poses, &carved, &mask, &rcfg).map_err(|e| save_diverged(e.into(), out, None))?;
    fs::create_dir_all(out).at(out)?;
    ply::write_ply(&result.cloud, &out.join("cloud.ply"))?;
    let records: Vec<LossRecord> =
        result.losses.iter().enumerate().map(|(step, loss)| LossRecord { step, loss: *loss, lr: rcfg.lr.means }).collect();
    report::write_loss_csv(&records, &out.join("loss.csv"))?;
    let rep = ReconReport {
        final_loss: result.losses.last().copied().unwrap_or(f64::NAN),
        iterations: result.losses.len(),
        per_view_psnr: per_view_psnr(&result.cloud, &frames, &poses)?,
        splats: result.cloud.len(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    write_json(&rep, &out.join("report.json"))?;
    cfg.freeze(out)?;
    Ok(rep)
}

pub fn cmd_reconstruct(cfg: &PipelineConfig, frames_dir: Option<&Path>) -> Result<Vec<ReconReport>> {
    let paths = RunPaths::new(&cfg.out);
    let dirs = match frames_dir {
        Some(d) => vec![d.to_path_buf()],
        None => bundle::list_bundles(&paths.inpaint())?,
    };
    dirs.iter()
        .map(|d| {
            let out = paths.recon().join(d.file_name().map(|n| n.to_owned()).unwrap_or_default());
            reconstruct_dir(cfg, d, &out)
        })
        .collect()
}

/// Everything `eval` produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub variants: Vec<MetricReport>,
    pub sweep: Vec<MetricReport>,
    pub base_only: Option<MetricReport>,
}

pub fn load_heldout(cfg: &PipelineConfig) -> Result<Vec<ObjectSample>> {
    let dir = RunPaths::new(&cfg.out).split(Split::Heldout);
    let dirs = bundle::list_bundles(&dir)?;
    dirs.iter()
        .map(|d| {
            let manifest = bundle::read_manifest(d)?;
            let mask: Mask3D = read_json(&d.join("mask.json"))?;
            Ok(ObjectSample { full: ply::read_ply(&d.join("full.ply"))?, mask, label: manifest.label, seed: manifest.seed })
        })
        .collect()
}

pub fn cmd_eval(cfg: &PipelineConfig) -> Result<EvalOutcome> {
    let paths = RunPaths::new(&cfg.out);
    let base = load_base(cfg)?;
    let adapters = load_adapters(cfg, &base)?;
    let dataset = load_heldout(cfg)?;
    let ecfg = cfg.eval_config();
    let inpainter = Inpainter { base: &base, adapters: Some(&adapters) };

    let mut variants = Vec::new();
    for v in EvalVariant::ALL {
        variants.push(evaluate_run(&dataset, v, Some(inpainter), &ecfg)?);
    }
    let full_views = ecfg.rig.n_views;
    let others: Vec<usize> = cfg.eval.view_sweep.iter().copied().filter(|v| *v != full_views).collect();
    let mut sweep = view_sweep(&dataset, inpainter, &ecfg, &others)?;
    if cfg.eval.view_sweep.contains(&full_views) {
        sweep.push(variants[2].clone());
    }
    sweep.sort_by_key(|r| r.views);
    let base_only = if cfg.eval.ablation {
        let b = Inpainter { base: &base, adapters: None };
        Some(evaluate_run(&dataset, EvalVariant::ConsistentInpaint, Some(b), &ecfg)?)
    } else {
        None
    };

    let dir = paths.eval();
    fs::create_dir_all(&dir).at(&dir)?;
    cfg.freeze(&dir)?;
    let outcome = EvalOutcome { variants, sweep, base_only };
    report::write_eval(&outcome, &dir)?;
    write_provenance(&dir, "eval", cfg, &[&paths.base_ckpt(), &paths.lora_ckpt()], serde_json::json!({ "eval": ecfg }))?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub index: DataIndex,
    pub pretrain: Vec<LossRecord>,
    pub lora: LoraOutcome,
    pub recon: Vec<ReconReport>,
    pub eval: EvalOutcome,
}

/// Runs every stage in order from one configuration.
pub fn cmd_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let index = cmd_gen_data(cfg)?;
    let pretrain = cmd_pretrain_base(cfg)?;
    let lora = cmd_train_lora(cfg)?;
    cmd_inpaint(cfg, None, None)?;
    let recon = cmd_reconstruct(cfg, None)?;
    let eval = cmd_eval(cfg)?;
    Ok(PipelineOutcome { index, pretrain, lora, recon, eval })
}

/// Runs `f` on a dedicated pool with exactly `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
