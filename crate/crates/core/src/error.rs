use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the matching engine.
#[derive(Debug, Error)]
pub enum NcError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("descriptor dimension mismatch: {a} vs {b}")]
    DescriptorMismatch { a: usize, b: usize },

    #[error("channel mismatch: layer expects {expected} input channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("odd dimension on axis {axis} (size {size}); pooling needs even sizes")]
    OddDimension { axis: usize, size: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index out of bounds: {0}")]
    OutOfBounds(String),

    #[error("correlation tensor is at stage {actual:?}, expected {expected}")]
    WrongStage {
        expected: &'static str,
        actual: crate::correlation::Stage,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated file: needed {needed} bytes, only {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("resource limit: needs {needed} bytes, limit is {limit} bytes")]
    ResourceLimit { needed: u64, limit: u64 },

    #[error("missing forward cache")]
    MissingCache,

    #[error("{0}")]
    Json(#[from] serde_json::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NcError> = std::result::Result<T, E>;
