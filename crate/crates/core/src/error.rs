use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("architecture error at layer {layer}: {reason}")]
    Architecture { layer: usize, reason: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("mask invariant violated in layer {layer}: {count} masked weights are nonzero")]
    MaskViolation { layer: usize, count: usize },

    #[error("missing tape entry: {0}")]
    MissingTape(String),

    #[error("non-finite value at step {step} in {location}")]
    NonFinite { step: usize, location: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
