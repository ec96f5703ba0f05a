// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

use crate::judge::JudgeVerdict;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's preconditions (dimension mismatch,
    /// out-of-range index, empty batch).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A binary file did not match its declared layout.
    #[error("format error at byte offset {offset}: {message}")]
    Format {
        /// Byte offset at which the problem was detected.
        offset: u64,
        /// What was wrong.
        message: String,
    },

    /// The data cannot support the requested operation (missing class,
    /// too few samples in a cell, single-class training set).
    #[error("data error: {0}")]
    Data(String),

    /// An infeasible or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training diverged.
    #[error("training error at step {step}: {message}")]
    Training {
        /// Optimizer step at which the failure was observed.
        step: u64,
        /// Description of the failure.
        message: String,
    },

    /// A statistic is undefined for the given input (zero variance,
    /// degenerate agreement).
    #[error("undefined metric: {0}")]
    Undefined(String),

    /// A judge response could not be interpreted.
    #[error("judge response parse error: {0}")]
    Parse(String),

    /// The judge service failed after all retries. Verdicts completed
    /// before the failure are carried along.
    #[error("judge unavailable: {message} ({} verdicts completed)", partial.len())]
    JudgeUnavailable {
        /// Last transport error.
        message: String,
        /// Verdicts obtained before giving up, in input order.
        partial: Vec<JudgeVerdict>,
    },

    /// Filesystem failure, annotated with the path involved.
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        /// Path being read or written.
        path: PathBuf,
        /// Underlying error.
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Self::Data(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Self::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
