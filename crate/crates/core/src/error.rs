use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Engine-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up for the requested op.
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// A parameter or argument is outside its documented domain.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// An op produced NaN or Inf; the graph is in an error state.
    #[error("non-finite values produced by {op}{detail}")]
    NonFinite { op: &'static str, detail: String },

    /// Contract violation (e.g. backward on a non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad config file or unknown key.
    #[error("config error: {0}")]
    Config(String),

    /// Caption token not in the embedder vocabulary.
    #[error("unknown token '{token}'; known tokens: {known}")]
    Vocab { token: String, known: String },

    /// Checkpoint/dataset container problems.
    #[error("container format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }
}
