use thiserror::Error;

/// Error type shared by every subsystem in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the attempted operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an API contract (e.g. non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Geometry is too degenerate to solve (e.g. all rays parallel).
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// Training produced a non-finite quantity.
    #[error("training error at step {step}: {msg}")]
    Training { step: u64, msg: String },

    /// Sampling produced a non-finite quantity.
    #[error("sampling error at step {step}: {msg}")]
    Sampling { step: u64, msg: String },

    /// On-disk container is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateGeometry(msg.into())
    }
}
