use std::fmt;

use thiserror::Error;

/// Row/column pair used in shape error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape(pub usize, pub usize);

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("pattern mismatch: {cols} columns not divisible by group size {m}")]
    PatternMismatch { cols: usize, m: usize },

    #[error("invalid sparsity pattern: {0}")]
    InvalidPattern(String),

    #[error("pattern violation at row {row}, group {group}: {nonzeros} nonzeros exceeds n={n}")]
    Constraint {
        row: usize,
        group: usize,
        nonzeros: usize,
        n: usize,
    },

    #[error("corrupt compressed tensor: {0}")]
    Corrupt(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("inconsistent data: {0}")]
    Consistency(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric error at step {step}: {msg}")]
    Numeric { step: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape {
            op,
            left: Shape(left.0, left.1),
            right: Shape(right.0, right.1),
        }
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
