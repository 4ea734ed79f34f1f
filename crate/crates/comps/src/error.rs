use std::path::PathBuf;

use comps_core::Error as CoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("line {line}: {message}")]
    ConfigLine { line: usize, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad file format: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 is success; 1 configuration or IO, 2 protocol, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(CoreError::Protocol(_)) => 2,
            Error::Core(CoreError::Numerical { .. } | CoreError::NonFinite { .. }) => 3,
            _ => 1,
        }
    }
}
