use thiserror::Error;

/// Errors raised by the numerical core and its I/O layers.
#[derive(Debug, Error)]
pub enum GpError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e} at jitter {jitter:e})")]
    NotPositiveDefinite { pivot: usize, value: f64, jitter: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("enumeration cap exceeded: {needed} > {cap}")]
    CapExceeded { needed: u128, cap: u128 },

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic number {found} (expected {expected})")]
    BadMagic { found: u32, expected: u32 },

    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GpError> = std::result::Result<T, E>;
