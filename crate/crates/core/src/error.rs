//! Error type shared by the whole crate.
//!
//! The categories map onto the CLI exit codes: configuration problems
//! (including shape/divisibility violations) exit with 2, I/O and file
//! format problems with 3, and numeric/tolerance failures with 1.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible. Reports the operation and both shapes.
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single-operand shape or axis constraint is violated.
    #[error("invalid shape in {op}: {msg} (got {shape:?})")]
    InvalidShape {
        op: &'static str,
        msg: String,
        shape: Vec<usize>,
    },

    /// Bad model or run configuration. `line` is set when the error can be
    /// attributed to a line of a parsed config file.
    #[error("config error{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config { line: Option<usize>, msg: String },

    /// Misuse of the autodiff tape (cross-tape ops, double backward, ...).
    #[error("tape error: {0}")]
    Tape(String),

    /// Numeric failure: non-finite losses, exceeded tolerances, divergence.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed tensor or weight container file.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config {
            line: None,
            msg: msg.into(),
        }
    }

    pub fn config_at(line: usize, msg: impl Into<String>) -> Self {
        Error::Config {
            line: Some(line),
            msg: msg.into(),
        }
    }
}
