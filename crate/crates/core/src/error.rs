use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("parameter `{0}` not found")]
    UnknownParam(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("loss term `{term}` is not finite ({value})")]
    Diverged { term: String, value: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config {path}: line {line}: {msg}")]
    Config {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
