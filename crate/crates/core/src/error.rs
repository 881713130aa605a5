use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: duplicate index {index:?}")]
    DuplicateIndex { line: usize, index: Vec<usize> },

    #[error("line {line}: non-finite value")]
    NonFinite { line: usize },

    #[error("index {index:?} out of bounds for shape {shape:?}")]
    IndexOutOfBounds { index: Vec<usize>, shape: Vec<usize> },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A non-finite gradient or loss showed up while updating `block`.
    #[error("divergence in {block} block: {detail}")]
    Divergence { block: String, detail: String },

    #[error("relative fitting error undefined: reference norm {norm:e} is below 1e-12")]
    RfeUndefined { norm: f64 },

    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u64),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
