use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported format / truncated: {0}")]
    Format(String),

    #[error("image dimensions {width}x{height} overflow")]
    DimensionOverflow { width: u64, height: u64 },

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("box {0} is empty after rounding and clamping to the image")]
    EmptyCrop(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("missing embedding for image {image_id} roi {roi_index:?}")]
    MissingEmbedding {
        image_id: u64,
        roi_index: Option<u32>,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
