use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: input outside the operation's domain: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("backward: {0}")]
    Backward(String),

    #[error("gradient check: {0}")]
    GradCheck(String),

    #[error("unknown domain `{0}` (expected rgb, depth, thermal or flow)")]
    UnknownDomain(String),

    #[error("unknown task `{0}` (expected sod or cod)")]
    UnknownTask(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: format error: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("domain `{0}` needs an auxiliary map but the sample has none")]
    MissingAux(String),

    #[error("invalid sample `{id}`: {msg}")]
    InvalidSample { id: String, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
