use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("tape state error: {0}")]
    TapeState(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds max_seq {max}")]
    ContextLength { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    Vocabulary { id: usize, vocab: usize },

    #[error("expansion error: {0}")]
    Expansion(String),

    #[error("incompatible config: {0}")]
    IncompatibleConfig(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure at step {step}: loss {loss}, lr {lr:.3e}, grad norm {grad_norm:.3e}")]
    Numerical { step: usize, loss: f64, lr: f64, grad_norm: f64 },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
