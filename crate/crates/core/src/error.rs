use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("fully masked slice {0}")]
    FullyMaskedSlice(usize),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("NaN gradient in parameter `{0}`")]
    NanGradient(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("instance too large for exhaustive enumeration: {0}")]
    SizeLimit(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
