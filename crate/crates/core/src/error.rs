// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Result alias used throughout `tracetrust`.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the toolkit.
///
/// Variants are grouped by cause rather than by module: a malformed container
/// is a [`Error::Format`] whether it holds a probe dataset or a model tensor.
#[non_exhaustive]
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Underlying reader or writer failed.
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    /// I/O failure tied to a specific file.
    #[error("{path}: {source}")]
    File {
        /// File being read or written.
        path: PathBuf,
        /// Underlying failure.
        source: std::io::Error,
    },

    /// Bytes do not follow the expected binary or text layout.
    #[error("format error: {0}")]
    Format(String),

    /// Payload ended before the length announced by its header.
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated {
        /// Bytes the header promised.
        expected: u64,
        /// Bytes actually available.
        found: u64,
    },

    /// A value violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// Two inputs that must agree on a dimension do not.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch {
        /// Dimension required by the first operand.
        expected: usize,
        /// Dimension supplied.
        got: usize,
    },

    /// Parameters are outside the domain of the operation.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Quantity is mathematically undefined for the given input.
    #[error("{0}")]
    Undefined(String),

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// CSV (de)serialization failure.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Self::Validation(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Self::Format(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::File {
            path: path.into(),
            source,
        }
    }
}
