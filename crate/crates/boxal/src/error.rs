//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by every layer of the crate.
///
/// Variants are grouped by concern: geometric/numeric input validation,
/// configuration validation, persistence, and internal invariant
/// violations (which indicate a bug, not bad user input).
#[derive(Debug, Error)]
pub enum Error {
    /// A box with non-positive extent or non-finite coordinates.
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    /// A class distribution whose entries are out of range or do not sum to 1.
    #[error("invalid class distribution: {0}")]
    InvalidDistribution(String),

    /// Two distributions (or feature vectors) of different dimension.
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    /// Malformed input to an operation (empty pools, non-finite values, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration that fails validation before any work starts.
    #[error("invalid config: {0}")]
    Config(String),

    /// Filesystem failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// JSON that does not parse or does not match the expected schema.
    /// The message carries file, line and column context.
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },

    /// A checkpoint written by an incompatible crate revision.
    #[error("checkpoint version {found} is not supported (expected {expected}); regenerate or migrate the checkpoint")]
    CheckpointVersion { expected: u32, found: u32 },

    /// A checkpoint whose config digest does not match the supplied config.
    #[error("checkpoint was produced under a different config (hash {found} != {expected})")]
    ConfigHashMismatch { expected: String, found: String },

    /// An invariant the pipeline is supposed to maintain was violated.
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
