//! Crate-wide error type and result alias.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by routing, objectives, metrics, and the training harness.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An input contained NaN or an infinity.
    NonFinite { what: &'static str },
    /// A value required to be strictly positive was not.
    NonPositive { what: &'static str, value: f64 },
    /// A vector or matrix had the wrong length for the operation.
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    /// A group partition failed validation.
    InvalidPartition { reason: String },
    /// A configuration value or combination is invalid.
    InvalidConfig { reason: String },
    /// An operation that needs at least one element received none.
    EmptyInput { what: &'static str },
    /// A quantity that must carry positive total mass was all zero.
    ZeroMass { what: &'static str },
    /// Training produced a non-finite loss at the given step.
    Diverged { step: usize },
    /// Config file parse failure with the offending line number.
    ConfigParse { line: usize, reason: String },
    /// Filesystem failure while reading or writing artifacts.
    Io { path: String, reason: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NonFinite { what } => {
                write!(f, "{what}: non-finite value (NaN or infinity)")
            }
            Error::NonPositive { what, value } => {
                write!(f, "{what}: must be strictly positive, got {value}")
            }
            Error::DimMismatch {
                what,
                expected,
                got,
            } => write!(f, "{what}: expected length {expected}, got {got}"),
            Error::InvalidPartition { reason } => {
                write!(f, "invalid group partition: {reason}")
            }
            Error::InvalidConfig { reason } => write!(f, "invalid configuration: {reason}"),
            Error::EmptyInput { what } => write!(f, "{what}: empty input"),
            Error::ZeroMass { what } => write!(f, "{what}: total mass is zero"),
            Error::Diverged { step } => {
                write!(f, "training diverged: non-finite loss at step {step}")
            }
            Error::ConfigParse { line, reason } => {
                write!(f, "config parse error at line {line}: {reason}")
            }
            Error::Io { path, reason } => write!(f, "io error on {path}: {reason}"),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    pub(crate) fn io(path: &std::path::Path, err: std::io::Error) -> Error {
        Error::Io {
            path: path.display().to_string(),
            reason: err.to_string(),
        }
    }
}
