use std::path::PathBuf;

/// Errors produced anywhere in the registration pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
    #[error("no point landed inside the image")]
    EmptyProjection,
    #[error("depth must be strictly positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("weight shape mismatch: {0}")]
    WeightShapeMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("coarse match ({row}, {col}) maps outside the fine grid")]
    WindowOutOfRange { row: usize, col: usize },
    #[error("ground-truth match set is empty")]
    EmptyGroundTruth,
    #[error("match set is empty")]
    EmptyMatchSet,
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("need at least 4 correspondences, got {0}")]
    InsufficientCorrespondences(usize),
    #[error("no consensus: best hypothesis had {0} inliers")]
    NoConsensus(usize),
    #[error("result list is empty")]
    EmptyResults,
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
