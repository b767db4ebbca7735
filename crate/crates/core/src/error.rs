use std::path::PathBuf;

use thiserror::Error;

use crate::ImageId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid depth {0}: must be finite and positive")]
    InvalidDepth(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("degenerate geometry: {0}")]
    Degenerate(&'static str),
    #[error("zero-norm descriptor for image {0}")]
    ZeroDescriptor(ImageId),
    #[error("feature family mismatch: expected `{expected}`, got `{found}`")]
    FamilyMismatch { expected: String, found: String },
    #[error("no semantic score for source image {0}")]
    MissingScore(ImageId),
    #[error("unknown query id {0}")]
    UnknownQuery(ImageId),
    #[error("too few correspondences: {found} (need at least {required})")]
    TooFewCorrespondences { found: usize, required: usize },
    #[error("no pose hypothesis reached {required} inliers")]
    NoConsensus { required: usize },
    #[error("{path}: offset {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed or missing input data rather than
    /// by invalid arguments.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::InvalidConfig(_))
    }
}
