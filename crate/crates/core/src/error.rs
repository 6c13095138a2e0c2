use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing directory: {0}")]
    MissingDirectory(PathBuf),
    #[error("missing input file: {0}")]
    MissingFile(PathBuf),
    #[error("no readable images under {0}")]
    NoReadableImages(PathBuf),
    #[error("missing class {label} for {dataset}")]
    MissingClass { dataset: String, label: String },
    #[error("cannot decode image for record {id}: {reason}")]
    ImageDecode { id: String, reason: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("prediction key sets differ: {0}")]
    KeyMismatch(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("train/test leakage: {0}")]
    Leakage(String),
    #[error("pretrained weights for {backbone} not found at {path}\n{instructions}")]
    WeightsUnavailable {
        backbone: String,
        path: PathBuf,
        instructions: String,
    },
    #[error("unsupported device {0:?}: only \"cpu\" is available in this build")]
    UnsupportedDevice(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("plot error: {0}")]
    Plot(String),
    #[error(transparent)]
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
