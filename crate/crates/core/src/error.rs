use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("rejected input: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("text-affine layer in train mode needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),

    #[error("no text embedding for label {0:?}")]
    MissingEmbedding(String),

    #[error("label {0:?} is not in the class vocabulary")]
    UnknownLabel(String),

    #[error("parameter {0:?} does not map to any partition category")]
    UncategorizedParameter(String),

    #[error("non-finite loss at batch sample {index} (label {label:?})")]
    NonFiniteLoss { index: usize, label: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("mask {} is not binary (found value {value})", .path.display())]
    NonBinaryMask { path: PathBuf, value: f32 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("base model fingerprint mismatch: checkpoint expects {expected}, model has {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", .path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
