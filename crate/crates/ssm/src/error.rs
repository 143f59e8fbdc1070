use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate vector: norm below 1e-12")]
    DegenerateVector,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("lookup failed: unknown key `{0}`")]
    Lookup(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-deterministic function: two forward passes disagree ({0} vs {1})")]
    Determinism(f64, f64),
    #[error("non-finite value encountered in `{0}`")]
    NonFinite(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
