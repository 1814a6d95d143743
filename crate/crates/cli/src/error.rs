use std::fmt;
use std::io;

use gti_core::{CheckpointError, GtiError};

/// A failure reported as one `error: CLASS: message` line plus an exit code.
#[derive(Debug)]
pub struct CliError {
    pub class: &'static str,
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub const USAGE: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const CONFIG: i32 = 4;

    pub fn new(class: &'static str, code: i32, message: impl Into<String>) -> Self {
        CliError {
            class,
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError::new("USAGE", Self::USAGE, message)
    }

    pub fn not_found(path: &std::path::Path) -> Self {
        CliError::new(
            "DATA_NOT_FOUND",
            Self::USAGE,
            format!("no such file: {}", path.display()),
        )
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError::new("CONFIG_MISMATCH", Self::CONFIG, message)
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError::new("NUMERICAL", Self::NUMERICAL, message)
    }

    /// The single stderr line.
    pub fn line(&self) -> String {
        let msg: String = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("error: {}: {}", self.class, msg)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl From<GtiError> for CliError {
    fn from(e: GtiError) -> Self {
        let msg = e.to_string();
        match e {
            GtiError::Io(io) => io.into(),
            GtiError::Parse { .. } | GtiError::Tag(_) | GtiError::Format(_) => {
                CliError::new("DATA_INVALID", Self::USAGE, msg)
            }
            GtiError::Feature(_) => CliError::new("FEATURE_MISSING", Self::USAGE, msg),
            GtiError::Argument(_) | GtiError::Dimension { .. } | GtiError::Lookup { .. } => {
                CliError::new("INVALID_ARGUMENT", Self::USAGE, msg)
            }
            GtiError::NonFinite(_) | GtiError::Numerical(_) => CliError::numerical(msg),
            GtiError::ConfigMismatch(_) => CliError::config(msg),
            GtiError::Checkpoint(CheckpointError::Manifest(_)) | GtiError::Checkpoint(_) => {
                CliError::new("CHECKPOINT_INVALID", Self::USAGE, msg)
            }
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::NotFound => CliError::new("DATA_NOT_FOUND", Self::USAGE, e.to_string()),
            _ => CliError::new("IO_ERROR", Self::USAGE, e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::new("IO_ERROR", Self::USAGE, e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
