use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor primitive was handed incompatible shapes.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid argument or state, with context.
    #[error("{0}")]
    Invalid(String),

    /// A configuration file or value was rejected.
    #[error("config: {0}")]
    Config(String),

    /// Malformed or unreadable data file (manifest, checkpoint, wav, ...).
    #[error("{path}: {msg}")]
    Data { path: String, msg: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn data(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
