use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum RcrError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] rcr_core::Error),
}

pub type Result<T, E = RcrError> = std::result::Result<T, E>;

impl RcrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RcrError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        RcrError::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// 2 for bad configuration, 3 for I/O and file formats, 4 for failures
    /// while computing.
    pub fn exit_code(&self) -> i32 {
        use rcr_core::Error as E;
        match self {
            RcrError::Config(_) => 2,
            RcrError::Core(E::InvalidArgument(_) | E::RateOrdering(..) | E::TooManyItems { .. }) => 2,
            RcrError::Io { .. } | RcrError::Format { .. } => 3,
            RcrError::Core(_) => 4,
        }
    }
}
