use std::io;

use thiserror::Error;

pub type Result<T, E = GtiError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GtiError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("lookup index {index} out of range for table with {rows} rows")]
    Lookup { index: usize, rows: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("malformed tag `{0}`")]
    Tag(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("feature error: {0}")]
    Feature(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl GtiError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        GtiError::Argument(msg.into())
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes, not a GTI checkpoint")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),

    #[error("manifest/shape disagreement: {0}")]
    ShapeMismatch(String),

    #[error("corrupt manifest: {0}")]
    Manifest(String),
}
