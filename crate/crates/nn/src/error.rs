use std::path::PathBuf;

pub type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown layer group {0:?}")]
    UnknownGroup(String),

    #[error("epoch {epoch} out of range for a {epochs}-epoch schedule")]
    EpochOutOfRange { epoch: usize, epochs: usize },

    #[error("training diverged at epoch {epoch}, iteration {iteration}: {detail}")]
    Divergence {
        epoch: usize,
        iteration: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed checkpoint: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error(transparent)]
    Core(#[from] layershift_core::Error),
}

impl NnError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        NnError::InvalidArgument(msg.into())
    }
}
