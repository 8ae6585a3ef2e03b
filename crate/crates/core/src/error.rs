use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or incomplete configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Mismatched or out-of-bounds shapes.
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("range error: {0}")]
    Range(String),
    /// An operation called in a state where it is not allowed.
    #[error("usage error: {0}")]
    Usage(String),
    #[error("training error: {0}")]
    Training(String),
    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
