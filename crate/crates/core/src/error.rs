use std::path::PathBuf;

/// Errors produced by the steering laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token {token} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { token: u32, vocab: usize },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("context overflow: {needed} tokens needed, limit {limit}")]
    ContextOverflow { needed: usize, limit: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("size mismatch: expected {expected} payload bytes, found {actual}")]
    SizeMismatch { expected: u64, actual: u64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
