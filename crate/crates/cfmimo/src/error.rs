//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by configuration validation, numerical routines, and the
/// experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or experiment-spec field is out of its valid range.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A linear system that the model guarantees to be invertible turned out
    /// to be numerically singular (e.g. all-zero covariances).
    #[error("singular linear system in {context}")]
    SingularSystem {
        /// Which computation hit the singular system.
        context: &'static str,
    },

    /// A result finalization was requested with no accumulated trials.
    #[error("no Monte Carlo trials accumulated before finalization")]
    EmptyAccumulator,

    /// Failure reading or writing experiment inputs/outputs.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed experiment spec file.
    #[error("spec parse error: {0}")]
    SpecParse(String),

    /// Failure serializing result rows.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
