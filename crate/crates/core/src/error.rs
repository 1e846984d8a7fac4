use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KistError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KistError {
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("rule file error at {context}: {reason}")]
    RuleSchema { context: String, reason: String },

    #[error("missing property `{0}` in region properties")]
    MissingProperty(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in layer `{layer}`")]
    NonFinite { layer: String },

    #[error("metric undefined: {0}")]
    MetricUndefined(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error at {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl KistError {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        KistError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
