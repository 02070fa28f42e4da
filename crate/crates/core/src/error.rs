use std::path::PathBuf;

use spanedit_autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid {0}")]
    Validation(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("instance too large for exhaustive enumeration: {0}; shrink the input or output")]
    TooLarge(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
