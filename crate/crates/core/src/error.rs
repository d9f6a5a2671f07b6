use std::io;

use thiserror::Error;

pub type Result<T, E = DmmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DmmError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("training diverged at step {step}: loss {loss}, last finite grad norm {grad_norm}")]
    Diverged { step: u64, loss: f64, grad_norm: f64 },
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DmmError {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Self::InvalidArgument { op, msg: msg.into() }
    }

    pub(crate) fn shape(op: &'static str, expected: &[usize], got: &[usize]) -> Self {
        Self::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }
}
