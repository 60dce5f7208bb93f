//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest schema violation at row {row}: {reason}")]
    ManifestSchema { row: usize, reason: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("numerical abort at step {step}: {component} = {value}")]
    NumericalAbort {
        step: u64,
        component: String,
        value: f64,
    },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint does not match config: {0}")]
    ConfigMismatch(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("csv error: {0}")]
    Csv(String),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 for user errors, 2 for numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericalAbort { .. } => 2,
            _ => 1,
        }
    }
}
