use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::PipelineConfig;
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "loopfill", version, about = "Looped multi-view inpainting of Gaussian-splat objects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads; results are reproducible for a fixed count.
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
    /// Run directory (overrides the config and LOOPFILL_OUT).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate training, validation and held-out bundles.
    GenData(Common),
    /// Pretrain the base denoiser on forward-arc sequences.
    PretrainBase(Common),
    /// Train LoRA adapters on looped orbits.
    TrainLora(Common),
    /// Inpaint one bundle (or every held-out bundle).
    Inpaint {
        #[command(flatten)]
        common: Common,
        /// Bundle directory; defaults to every held-out bundle.
        #[arg(long, value_name = "DIR")]
        bundle: Option<PathBuf>,
        /// Complete reference image placed in front of the sequence.
        #[arg(long, value_name = "PATH")]
        reference: Option<PathBuf>,
    },
    /// Fit Gaussian clouds to inpainted frames.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Frames directory written by `inpaint`; defaults to all of them.
        #[arg(long, value_name = "DIR")]
        frames: Option<PathBuf>,
    },
    /// Score the three pipeline variants and the view sweep.
    Eval(Common),
    /// Run every stage in order.
    Pipeline(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::PretrainBase(c)
            | Command::TrainLora(c)
            | Command::Eval(c)
            | Command::Pipeline(c)
            | Command::Inpaint { common: c, .. }
            | Command::Reconstruct { common: c, .. } => c,
        }
    }
}

pub fn load_config(common: &Common) -> Result<PipelineConfig> {
    PipelineConfig::load(&common.config)?.with_overrides(common.seed, common.threads, common.out.clone())
}

/// Runs a parsed command line and returns a one-line status message.
pub fn run(cli: Cli) -> Result<String> {
    let cfg = load_config(cli.command.common())?;
    commands::with_threads(cfg.threads, || -> Result<String> {
        match &cli.command {
            Command::GenData(_) => {
                let index = commands::cmd_gen_data(&cfg)?;
                Ok(format!("wrote {} bundles to {}", index.bundles.len(), cfg.out.display()))
            }
            Command::PretrainBase(_) => {
                let curve = commands::cmd_pretrain_base(&cfg)?;
                Ok(format!("pretrained base for {} steps, final loss {:.4}", curve.len(), last_loss(&curve)))
            }
            Command::TrainLora(_) => {
                let out = commands::cmd_train_lora(&cfg)?;
                Ok(format!(
                    "trained adapters for {} steps; validation loss base {:.4} -> adapted {:.4}",
                    out.curve.len(),
                    out.ablation.base_only_loss,
                    out.ablation.adapted_loss
                ))
            }
            Command::Inpaint { bundle, reference, .. } => {
                let outs = commands::cmd_inpaint(&cfg, bundle.as_deref(), reference.as_deref())?;
                Ok(format!("inpainted {} bundles", outs.len()))
            }
            Command::Reconstruct { frames, .. } => {
                let reports = commands::cmd_reconstruct(&cfg, frames.as_deref())?;
                Ok(format!("reconstructed {} objects", reports.len()))
            }
            Command::Eval(_) => {
                let out = commands::cmd_eval(&cfg)?;
                Ok(crate::report::summary_table(&out))
            }
            Command::Pipeline(_) => {
                let out = commands::cmd_pipeline(&cfg)?;
                Ok(crate::report::summary_table(&out.eval))
            }
        }
    })?
}

fn last_loss(curve: &[loopfill_core::model::LossRecord]) -> f64 {
    curve.last().map(|r| r.loss).unwrap_or(f64::NAN)
}
