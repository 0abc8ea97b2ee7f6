use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid token id {id} for vocabulary of size {vocab_size}")]
    InvalidTokenId { id: usize, vocab_size: usize },

    #[error("enumeration budget exceeded: |V|^m = {needed} leaves > budget {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },

    #[error("{0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("vocabulary mismatch between teacher and student")]
    VocabMismatch,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error at line {line}: missing or invalid key `{key}`")]
    Schema { line: usize, key: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
