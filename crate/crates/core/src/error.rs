use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph has already been consumed by a backward pass")]
    GraphConsumed,

    #[error("parameter {index} requires grad but has no gradient")]
    MissingGrad { index: usize },

    #[error("optimizer state does not match parameter {index}: {detail}")]
    OptimizerState { index: usize, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("corrupt checkpoint at byte offset {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },

    #[error("data format error in {source_name}: {reason}")]
    Format { source_name: String, reason: String },

    #[error("non-finite loss at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("pruning: {0}")]
    Pruning(String),

    #[error("missing latency table entry for layer {layer}: key {key:?}")]
    MissingLutKey { layer: usize, key: [usize; 5] },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
