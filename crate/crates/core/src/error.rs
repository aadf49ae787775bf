use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("unknown instance id {0}")]
    Lookup(u32),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersion { expected: u32, found: u32 },
    #[error("checksum failure for {path}: {reason}")]
    Checksum { path: PathBuf, reason: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(what: &str, a: (usize, usize), b: (usize, usize)) -> Self {
        Error::Dimension(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
    }
}
