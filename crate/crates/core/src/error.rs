use std::path::PathBuf;

use thiserror::Error;

use crate::store::LayerId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("model path is not well-typed: {0}")]
    PathType(String),

    #[error("unknown layer id {0}")]
    DanglingLayer(LayerId),

    #[error("unknown hyperparameter `{0}`")]
    UnknownHyperparam(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("idx format: {0}")]
    Idx(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("layer {id}: content hash mismatch")]
    HashMismatch { id: LayerId },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
