use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid residue '{ch}' at position {position} (1-based)")]
    InvalidResidue { ch: char, position: usize },

    #[error("line {line}: {message}")]
    Dataset { line: usize, message: String },

    #[error("missing column '{0}' in header")]
    MissingColumn(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown {kind} label '{label}'")]
    UnknownLabel { kind: &'static str, label: String },

    #[error("architecture mismatch: {dimension} (expected {expected}, found {found})")]
    Mismatch {
        dimension: String,
        expected: String,
        found: String,
    },

    #[error("corrupt checkpoint {path}: {message}")]
    CorruptCheckpoint { path: PathBuf, message: String },

    #[error("missing input: {0}")]
    MissingInput(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
