//! Crate-wide error type.
//!
//! Every fallible path in the library funnels into [`Error`]; the variants
//! separate "your file is malformed" from "your shapes don't line up" from
//! "the math blew up" so callers can decide what is retryable.

use std::path::PathBuf;

/// Unified error for data loading, preprocessing, modeling and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A text record could not be parsed (bad float, wrong column count, ...).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// An OS-level file problem, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Structurally invalid input: shape mismatches, empty datasets,
    /// out-of-range indices. The message names the operation and the
    /// offending dimensions.
    #[error("structure error: {0}")]
    Structure(String),

    /// Numeric failure: NaN/Inf encountered, singular statistics, divergence.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A binary or JSON artifact did not match the expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// An invalid hyperparameter or option combination.
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Attach a path to a raw IO error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
