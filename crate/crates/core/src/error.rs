use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("interpolation point is not finite: {0:?}")]
    InvalidPoint(Vec<f64>),
    #[error("label {label} out of range for {region_count} regions")]
    LabelOutOfRange { label: u8, region_count: usize },
    #[error("zero variance input to normalized cross-correlation")]
    ZeroVariance,
    #[error("prior precision scale must be positive, got {0}")]
    NonPositivePrior(f64),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("loss node is not scalar (len {0})")]
    NonScalarLoss(usize),
    #[error("unsupported operation: {0}")]
    UnsupportedOp(String),
    #[error("non-finite loss at iteration {iteration}: {value}")]
    NonFiniteLoss { iteration: usize, value: f64 },
    #[error("dataset is empty or too small: {0}")]
    EmptyDataset(String),
    #[error("region {0} is empty")]
    EmptyRegion(u8),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
