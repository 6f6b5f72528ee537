use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed scene file. `frame` is `None` for the manifest.
    #[error("parse error in {} at field `{field}`: {message}", frame.map_or("manifest".to_string(), |i| format!("frame {i}")))]
    Parse {
        frame: Option<usize>,
        field: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("least-squares fit failed: {0}")]
    Fit(String),

    #[error("unstable queue: arrival rate {lambda} >= service rate {mu}")]
    UnstableQueue { lambda: f64, mu: f64 },

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
