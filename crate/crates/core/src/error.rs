use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("data length {len} does not match shape {shape} ({expected} elements)")]
    DataLength {
        shape: Shape,
        len: usize,
        expected: usize,
    },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("loss must be a scalar of shape (1,1,1,1), got {0}")]
    NonScalarLoss(Shape),

    #[error("malformed graph: {0}")]
    MalformedGraph(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tensor format: {0}")]
    Format(String),

    #[error("loss became NaN at step {step}")]
    NanLoss { step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

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
}
