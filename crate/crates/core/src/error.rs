use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0} already exists and is not empty")]
    AlreadyExists(PathBuf),
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("window out of bounds: {0}")]
    OutOfBounds(String),
    #[error("unsupported array encoding: {0}")]
    Unsupported(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("digest mismatch for {path}: expected {expected}, got {actual}")]
    Integrity {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("fetch failed: {0}")]
    Fetch(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("raster too small: {0}")]
    TooSmall(String),
    #[error("too few items: {0}")]
    TooFew(String),
    #[error("labels contain a single class; precision-recall is undefined")]
    DegenerateLabels,
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("scene has no positive pixels: {0}")]
    DegenerateScene(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("time budget of {limit_secs:.0}s exceeded after epoch {epoch}")]
    Timeout { epoch: usize, limit_secs: f64 },
    #[error(transparent)]
    Nn(#[from] slidecube_nn::NnError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}

impl<T> IoContext<T> for std::result::Result<T, serde_json::Error> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Json {
            path: path.into(),
            source,
        })
    }
}
