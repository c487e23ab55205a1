//! File formats, configuration and the command-line pipeline around
//! [`loopfill_core`]: PLY clouds, PNG and raw `f32` images, camera manifests,
//! model checkpoints, CSV/JSON reports and the `loopfill` subcommands.

pub mod bundle;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod image_io;
pub mod ply;
pub mod report;

pub use config::PipelineConfig;
pub use error::{PipelineError, Result};
