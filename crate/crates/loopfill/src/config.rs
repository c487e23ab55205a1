//! Single-file TOML pipeline configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use loopfill_core::camera::{RigSpec, DEFAULT_ELEVATION_DEG, DEFAULT_FOV_Y_DEG, DEFAULT_RADIUS};
use loopfill_core::eval::EvalConfig;
use loopfill_core::geometry::{MaskVariant, MAX_COMPLEXITY, MIN_COMPLEXITY};
use loopfill_core::model::{DenoiserConfig, SampleConfig, TrainConfig};
use loopfill_core::recon::ReconConfig;

use crate::error::{IoContext, PipelineError, Result};

/// Environment variable that overrides the output root.
pub const OUT_ENV: &str = "LOOPFILL_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub size: usize,
    pub views: usize,
    pub complexity: usize,
    /// Forward-arc sequences used to pretrain the base model.
    pub arc_objects: usize,
    pub arc_frames: usize,
    pub arc_degrees: f64,
    /// Looped orbits used to train the adapters.
    pub orbit_objects: usize,
    /// Looped orbits held out from all training.
    pub heldout_objects: usize,
    /// Held-out orbits used only for the adapter validation loss.
    pub validation_objects: usize,
    /// Mask families, cycled over objects in order.
    pub mask_mix: Vec<MaskVariant>,
    pub elevation_deg: f64,
    pub radius: f64,
    pub fov_y_deg: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            size: 64,
            views: 16,
            complexity: 64,
            arc_objects: 128,
            arc_frames: 17,
            arc_degrees: 120.0,
            orbit_objects: 128,
            heldout_objects: 20,
            validation_objects: 8,
            mask_mix: MaskVariant::ALL.to_vec(),
            elevation_deg: DEFAULT_ELEVATION_DEG,
            radius: DEFAULT_RADIUS,
            fov_y_deg: DEFAULT_FOV_Y_DEG,
        }
    }
}

impl DataConfig {
    pub fn rig(&self, views: usize) -> RigSpec {
        RigSpec {
            n_views: views,
            elevation_deg: self.elevation_deg,
            radius: self.radius,
            fov_y_deg: self.fov_y_deg,
            width: self.size,
            height: self.size,
            azimuth_offset_deg: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale: f64,
    pub train: TrainConfig,
    /// Draws per held-out item for the validation loss.
    pub validation_draws: usize,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 16, scale: 1.0, train: TrainConfig { steps: 400, ..TrainConfig::default() }, validation_draws: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub heldout_views: usize,
    pub view_sweep: Vec<usize>,
    pub recon: ReconConfig,
    /// Also score the consistent variant with the base model alone.
    pub ablation: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            heldout_views: 16,
            view_sweep: vec![8, 12, 16],
            recon: ReconConfig { iterations: 1000, ..ReconConfig::default() },
            ablation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
    pub data: DataConfig,
    pub denoiser: DenoiserConfig,
    pub pretrain: TrainConfig,
    pub lora: LoraConfig,
    pub sample: SampleConfig,
    pub recon: ReconConfig,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            denoiser: DenoiserConfig::default(),
            pretrain: TrainConfig { lr: 1e-3, steps: 1000, ..TrainConfig::default() },
            lora: LoraConfig::default(),
            sample: SampleConfig::default(),
            recon: ReconConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

fn config_err(msg: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(msg.to_string())
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.size != self.denoiser.frame_size {
            return Err(config_err(format!(
                "data.size {} differs from denoiser.frame_size {}",
                d.size, self.denoiser.frame_size
            )));
        }
        if !(MIN_COMPLEXITY..=MAX_COMPLEXITY).contains(&d.complexity) {
            return Err(config_err(format!("data.complexity must lie in [{MIN_COMPLEXITY}, {MAX_COMPLEXITY}]")));
        }
        if d.mask_mix.is_empty() {
            return Err(config_err("data.mask_mix is empty"));
        }
        if d.views == 0 || d.size < 11 {
            return Err(config_err("data.views must be positive and data.size at least 11"));
        }
        if (d.views + 1) % 4 != 1 || d.arc_frames % 4 != 1 {
            return Err(config_err("loop-closed orbits and arcs must have 4n+1 frames"));
        }
        if d.views + 1 > self.denoiser.max_frames || d.arc_frames > self.denoiser.max_frames {
            return Err(config_err("sequences exceed denoiser.max_frames"));
        }
        if self.eval.view_sweep.iter().any(|v| v % 4 != 0 || *v == 0 || v + 1 > self.denoiser.max_frames) {
            return Err(config_err("every eval.view_sweep entry must be a positive multiple of 4 within max_frames"));
        }
        if self.threads == 0 {
            return Err(config_err("threads must be at least 1"));
        }
        self.denoiser.validate().map_err(config_err)?;
        self.pretrain.validate().map_err(config_err)?;
        self.lora.train.validate().map_err(config_err)?;
        self.recon.validate().map_err(config_err)?;
        self.eval.recon.validate().map_err(config_err)?;
        if self.sample.steps == 0 {
            return Err(config_err("sample.steps must be positive"));
        }
        Ok(())
    }

    /// Applies command-line and environment overrides, then revalidates.
    pub fn with_overrides(mut self, seed: Option<u64>, threads: Option<usize>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(t) = threads {
            self.threads = t;
        }
        if let Some(o) = out {
            self.out = o;
        } else if let Ok(o) = std::env::var(OUT_ENV) {
            self.out = PathBuf::from(o);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            rig: self.data.rig(self.data.views),
            heldout_views: self.eval.heldout_views,
            recon: ReconConfig { seed: self.seed ^ self.eval.recon.seed, ..self.eval.recon },
            sample: SampleConfig { seed: self.seed ^ self.sample.seed, ..self.sample },
        }
    }

    /// Writes the resolved configuration next to a command's outputs.
    pub fn freeze(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        let path = dir.join("config.resolved.toml");
        std::fs::write(&path, self.to_toml()).at(&path)
    }
}
