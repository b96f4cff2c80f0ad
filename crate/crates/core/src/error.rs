use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is not connected to any leaf that requires a gradient")]
    DetachedLoss,

    #[error("backward already ran on this graph")]
    BackwardTwice,

    #[error("batch norm evaluated in eval mode before any running-statistics update ({0})")]
    UninitializedStatistics(String),

    #[error("invalid mask-head spec: {0}")]
    InvalidSpec(String),

    #[error("degenerate box {0}")]
    DegenerateBox(String),

    #[error("dataset generation failed: {0}")]
    Placement(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step} (learning rate {lr}): loss is {loss}")]
    Diverged { step: usize, lr: f64, loss: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("png error: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
