use std::path::{Path, PathBuf};

/// Errors of the lab layer. Each maps to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("malformed {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(read_core::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => EXIT_CONFIG,
            LabError::Missing(_) => EXIT_MISSING,
            LabError::Numeric(_) => EXIT_NUMERIC,
            LabError::Core(e) => match e {
                read_core::Error::NonFiniteLoss { .. }
                | read_core::Error::Domain { .. }
                | read_core::Error::ZeroNorm => EXIT_NUMERIC,
                read_core::Error::Invalid(_) => EXIT_CONFIG,
                _ => EXIT_OTHER,
            },
            LabError::Format { .. } | LabError::Io { .. } => EXIT_OTHER,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return LabError::Missing(path.to_path_buf());
        }
        LabError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, detail: impl Into<String>) -> Self {
        LabError::Format {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }
}

impl From<read_core::Error> for LabError {
    fn from(e: read_core::Error) -> Self {
        LabError::Core(e)
    }
}
