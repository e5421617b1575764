use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::TapeError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("image `{0}` has no matching mask")]
    MissingMask(String),
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },
    #[error("translation ({i}, {j}) outside [-{max}, {max}]")]
    TranslationOutOfRange { i: isize, j: isize, max: isize },
    #[error("coverage mismatch: {0}")]
    Coverage(String),
    #[error("{0}")]
    Usage(String),
    #[error("cell {cell} has no checkpoint at {path}; run `train` first")]
    MissingCheckpoint { cell: String, path: PathBuf },
    #[error("no evaluation results under {0}; run `evaluate` first")]
    NoInput(PathBuf),
    #[error("{} cell(s) failed: {}", .0.len(), .0.join(", "))]
    CellsFailed(Vec<String>),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
