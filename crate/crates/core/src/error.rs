use alloc::boxed::Box;
use alloc::string::String;

use crate::geometry::GaussianCloud;
use crate::model::LoraAdapters;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Last parameters known to be finite when an optimization diverged.
#[derive(Debug, Clone)]
pub enum Checkpoint {
    Adapters(LoraAdapters),
    Base(crate::model::Denoiser),
    Cloud(GaussianCloud),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("carving removed every splat ({total} masked); regenerate the mask")]
    DegenerateCarve { total: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("singular covariance (condition estimate {condition:e})")]
    SingularCovariance { condition: f64 },

    #[error("optimization diverged at step {step} (loss {loss})")]
    Diverged {
        step: usize,
        loss: f64,
        last_good: Option<Box<Checkpoint>>,
    },

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Configuration(String),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}
