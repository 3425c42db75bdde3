use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
///
/// `Config` and `MissingInput` are validation failures that the command line
/// front-end maps to exit status 2; everything else is a runtime failure.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing input artifact: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("dataset is empty after filtering")]
    EmptyCorpus,

    #[error("split error: {0}")]
    Split(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that stem from invalid configuration or missing inputs.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::MissingInput(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
