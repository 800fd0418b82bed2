use thiserror::Error;

/// Errors produced anywhere in the core crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch in expression graph: {0}")]
    Shape(String),

    #[error("expected a scalar (1x1) node, found {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("value outside the domain: {0}")]
    Domain(String),

    #[error("a batch is required to evaluate this game")]
    MissingBatch,

    #[error("eigenvalue iteration did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("size mismatch: {left} points vs {right} points")]
    SizeMismatch { left: usize, right: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
