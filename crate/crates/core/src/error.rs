// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("training diverged at step {step}: loss = {loss} ({detail})")]
    Diverged { step: usize, loss: f64, detail: String },

    #[error("missing dictionary for hook {0}")]
    MissingDictionary(String),

    #[error("dictionary has no alive features: {0}")]
    DeadDictionary(String),

    #[error("missing statistics: {0}")]
    MissingStatistics(String),

    #[error("root is unreachable from any leaf: {0}")]
    UnreachableRoot(String),

    #[error("node not in graph: {0}")]
    NodeNotFound(String),

    #[error("root activation is zero; recovery is undefined")]
    ZeroRoot,

    #[error("archive format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable class name, used by the command line front end.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::NonScalarRoot(_) => "non_scalar_root",
            Error::TapeConsumed => "tape_consumed",
            Error::InvalidInput(_) => "invalid_input",
            Error::Diverged { .. } => "diverged",
            Error::MissingDictionary(_) => "missing_dictionary",
            Error::DeadDictionary(_) => "dead_dictionary",
            Error::MissingStatistics(_) => "missing_statistics",
            Error::UnreachableRoot(_) => "unreachable_root",
            Error::NodeNotFound(_) => "node_not_found",
            Error::ZeroRoot => "zero_root",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
