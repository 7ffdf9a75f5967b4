use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point has non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("viewing direction is degenerate (camera and point coincide)")]
    DegenerateDirection,
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("target carries the full contribution (w = {0}); background undefined")]
    FullContribution(f64),
    #[error("degenerate weights: sum of squared weights {0} is too small")]
    DegenerateWeights(f64),
    #[error("zero-norm feature vector")]
    ZeroVector,
    #[error("ambiguous normal: the two smallest scales coincide")]
    AmbiguousNormal,
    #[error("no visible views")]
    NoVisibleViews,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("too few matches: need at least {needed}, got {got}")]
    TooFewMatches { needed: usize, got: usize },
    #[error("window contains no valid cells")]
    EmptyWindow,
    #[error("degenerate configuration for the linear solver")]
    DegenerateConfiguration,
    #[error("no consensus: best hypothesis has {inliers} inliers, need {required}")]
    NoConsensus { inliers: usize, required: usize },
    #[error("refinement diverged at iteration {0}")]
    RefinementDiverged(usize),
    #[error("scene hash mismatch: database built for {expected}, got {got}")]
    SceneHashMismatch { expected: String, got: String },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

impl Error {
    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonPositiveDepth(_) => "NonPositiveDepth",
            Error::DegenerateDirection => "DegenerateDirection",
            Error::InvalidPose(_) => "InvalidPose",
            Error::InvalidCamera(_) => "InvalidCamera",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::InvalidParams(_) => "InvalidParams",
            Error::FullContribution(_) => "FullContribution",
            Error::DegenerateWeights(_) => "DegenerateWeights",
            Error::ZeroVector => "ZeroVector",
            Error::AmbiguousNormal => "AmbiguousNormal",
            Error::NoVisibleViews => "NoVisibleViews",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::TooFewMatches { .. } => "TooFewMatches",
            Error::EmptyWindow => "EmptyWindow",
            Error::DegenerateConfiguration => "DegenerateConfiguration",
            Error::NoConsensus { .. } => "NoConsensus",
            Error::RefinementDiverged(_) => "RefinementDiverged",
            Error::SceneHashMismatch { .. } => "SceneHashMismatch",
            Error::Parse { .. } => "Parse",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
