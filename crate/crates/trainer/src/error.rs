use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite loss at iteration {iter} and no loss scaler configured")]
    NonFiniteLoss { iter: u64 },

    #[error("non-finite gradient for '{tensor}' at iteration {iter} and no loss scaler configured")]
    NonFiniteGradient { iter: u64, tensor: String },

    #[error("malformed trace at line {line}: {msg}")]
    Trace { line: usize, msg: String },

    #[error(transparent)]
    Core(#[from] lowbit_core::Error),
}

pub type TrainerResult<T> = std::result::Result<T, TrainerError>;

impl TrainerError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TrainerError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 1 for configuration problems, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            TrainerError::Config(_) => 1,
            _ => 2,
        }
    }
}
