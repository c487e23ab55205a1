use std::path::{Path, PathBuf};

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] loopfill_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("missing artifact {path}: {what}")]
    Missing { path: PathBuf, what: String },
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        PipelineError::Format { path: path.to_path_buf(), message: message.into() }
    }

    /// Process exit status: 2 for configuration problems, 3 for bad or
    /// missing data, 4 for numerical and training failures.
    pub fn exit_code(&self) -> i32 {
        use loopfill_core::Error as E;
        match self {
            PipelineError::Config(_) | PipelineError::Core(E::Configuration(_)) => 2,
            PipelineError::Core(E::Numerical(_) | E::SingularCovariance { .. } | E::Diverged { .. }) => 4,
            _ => 3,
        }
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| PipelineError::io(path, e))
    }
}
