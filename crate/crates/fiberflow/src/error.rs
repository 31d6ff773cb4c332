//! Error types shared across the library.

use thiserror::Error;

/// Top-level error for fallible library operations.
///
/// Programmer errors (dimension mismatches, invalid grid sizes) panic via
/// assertions instead; these variants cover conditions a correct caller can
/// still hit at run time.
#[derive(Debug, Error)]
pub enum FiberflowError {
    /// A configuration value is missing, unparsable, or out of range.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical procedure failed to converge or produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Cross-link binding could not place the requested number of links.
    #[error("binding failure: {0}")]
    Binding(String),

    /// An acceptance-style check ran to completion and failed its tolerance.
    #[error("check failed: {0}")]
    CheckFailed(String),

    /// Filesystem or serialization problem while writing run outputs.
    #[error("output error: {0}")]
    Output(String),
}

impl From<std::io::Error> for FiberflowError {
    fn from(e: std::io::Error) -> Self {
        FiberflowError::Output(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, FiberflowError>;
