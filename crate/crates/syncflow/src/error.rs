//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes: usage (1),
//! configuration (2), data/format (3), numerical failure (4).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Command-line misuse: unknown subcommand, missing flag, bad flag value.
    #[error("usage: {0}")]
    Usage(String),

    /// Inconsistent or invalid configuration (shape/config mismatches between
    /// components, invalid hyperparameters, contract violations).
    #[error("config: {0}")]
    Config(String),

    /// Tensor shape errors: mismatched dimensions, indivisible axes.
    #[error("shape: {0}")]
    Shape(String),

    /// Malformed or missing files, unknown formats, truncated payloads.
    #[error("format: {0}")]
    Format(String),

    /// Numerical contract violations: NaN/Inf appearing in tensor data,
    /// divergence during training or sampling.
    #[error("numerical: {0}")]
    Numerical(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Format(_) | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
