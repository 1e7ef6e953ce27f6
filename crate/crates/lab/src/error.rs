use std::path::PathBuf;

pub type LabResult<T> = Result<T, LabError>;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    /// Config problem anchored to a position in the source file.
    #[error("{path}:{line}:{column}: {message}")]
    Config { path: String, line: usize, column: usize, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A stream directory, checkpoint or CSV file that does not parse.
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] sscl_core::Error),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        LabError::Format { path: path.into(), message: message.into() }
    }
}
