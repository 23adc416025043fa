use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes or parameters supplied by the caller.
    #[error("configuration error: {0}")]
    Config(String),

    /// A NaN or infinity appeared at a layer boundary.
    #[error("non-finite value at layer {layer}: {detail}")]
    Numeric { layer: usize, detail: String },

    /// An operation was called with state it does not support.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Normalization state not ready for the requested mode.
    #[error("state error: {0}")]
    State(String),

    /// Invalid input data.
    #[error("input error: {0}")]
    Input(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Numeric { .. } => "numeric",
            Error::Contract(_) => "contract",
            Error::State(_) => "state",
            Error::Input(_) => "input",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
