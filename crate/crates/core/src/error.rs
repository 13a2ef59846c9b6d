use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pretraining toolkit.
#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("token id {id} at position {position} is outside the vocabulary (size {size})")]
    IdOutOfRange { position: usize, id: u32, size: usize },

    #[error("shape mismatch for tensor `{name}`: donor {donor:?}, target {target:?}")]
    ShapeMismatch {
        name: String,
        donor: Vec<usize>,
        target: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("activation cache already consumed")]
    CacheConsumed,

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("training aborted at step {step}: {reason}")]
    Diverged {
        step: u64,
        reason: String,
        /// Parameters from the last step that produced a finite loss.
        last_good: Box<crate::tensor::ParamSet<f32>>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
