use std::path::Path;

use thiserror::Error;

use crate::nn::StateError;
use crate::tensor::checkpoint::CheckpointError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not match the configured architecture: {0}")]
    State(#[from] StateError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {message}")]
    Image { path: String, message: String },
    #[error("manifest {path}, line {line}: {message}")]
    Manifest {
        path: String,
        line: usize,
        message: String,
    },
    #[error("non-finite loss at iteration {iteration} (batch seed {batch_seed}): {detail}")]
    NonFinite {
        iteration: usize,
        batch_seed: u64,
        detail: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit status: 2 configuration, 3 i/o, 4 numeric failure,
    /// 5 checkpoint mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) | Error::Tensor(_) => 2,
            Error::Io { .. } | Error::Image { .. } | Error::Manifest { .. } => 3,
            Error::Checkpoint(CheckpointError::Io { .. }) => 3,
            Error::NonFinite { .. } => 4,
            Error::Checkpoint(_) | Error::State(_) => 5,
        }
    }
}
