use std::path::{Path, PathBuf};

pub type Result<T, E = StudyError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum StudyError {
    #[error(transparent)]
    Core(#[from] layershift_core::Error),

    #[error(transparent)]
    Nn(#[from] layershift_nn::NnError),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Manifest or configuration value that violates its schema.
    #[error("{field}: {msg}")]
    Schema { field: String, msg: String },

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("missing cells: {}", .0.join(", "))]
    MissingCells(Vec<String>),

    #[error("step {step} failed: {msg}")]
    Step { step: String, msg: String },
}

impl StudyError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        StudyError::InvalidArgument(msg.into())
    }

    pub fn schema(field: impl Into<String>, msg: impl Into<String>) -> Self {
        StudyError::Schema {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return StudyError::MissingFile(path.to_path_buf());
        }
        StudyError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        StudyError::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// Stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            StudyError::Core(layershift_core::Error::Io { .. }) => "io",
            StudyError::Core(_) => "data",
            StudyError::Nn(layershift_nn::NnError::Divergence { .. }) => "divergence",
            StudyError::Nn(layershift_nn::NnError::Io { .. }) => "io",
            StudyError::Nn(layershift_nn::NnError::Checkpoint { .. }) => "checkpoint",
            StudyError::Nn(_) => "model",
            StudyError::InvalidArgument(_) => "invalid_argument",
            StudyError::Schema { .. } => "schema",
            StudyError::MissingFile(_) => "missing_file",
            StudyError::Io { .. } => "io",
            StudyError::Format { .. } => "format",
            StudyError::MissingCells(_) => "missing_cells",
            StudyError::Step { .. } => "step_failed",
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            StudyError::MissingFile(p) => Some(p),
            StudyError::Io { path, .. } | StudyError::Format { path, .. } => Some(path),
            StudyError::Core(layershift_core::Error::Io { path, .. })
            | StudyError::Core(layershift_core::Error::Format { path, .. })
            | StudyError::Nn(layershift_nn::NnError::Io { path, .. })
            | StudyError::Nn(layershift_nn::NnError::Checkpoint { path, .. }) => Some(path),
            _ => None,
        }
    }
}
