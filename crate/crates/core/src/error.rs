//! Crate-wide error type.

/// Errors produced by any dessie operation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A named array required by an archive format is absent.
    #[error("missing array `{0}` in archive")]
    MissingArray(String),

    /// Archive carries a different format tag than the caller expected.
    #[error("archive format mismatch: expected `{expected}`, found `{found}`")]
    FormatMismatch { expected: String, found: String },

    /// A named array exists but its shape or dtype is wrong.
    #[error("array `{name}`: {reason}")]
    BadArray { name: String, reason: String },

    /// A model-asset invariant does not hold; `field` names the offender.
    #[error("invalid assets: field `{field}`: {reason}")]
    InvalidAssets { field: &'static str, reason: String },

    /// Camera parameters violate their invariants.
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    /// Geometry has non-positive depth after applying the camera translation.
    #[error("geometry behind camera: minimum depth {0}")]
    BehindCamera(f64),

    /// Two inputs that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Pose or shape parameters violate their invariants.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A keypoint metric was asked for with no visible keypoints.
    #[error("no visible keypoints")]
    NoVisibleKeypoints,

    /// A point-cloud metric was asked for with an empty cloud.
    #[error("empty point cloud")]
    EmptyCloud,

    /// Geometric configuration too degenerate to proceed (rank-deficient, empty render).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Optimization produced a non-finite loss.
    #[error("training diverged: non-finite loss at {0}")]
    Diverged(String),

    /// Bad or unknown configuration key/value.
    #[error("config error: {0}")]
    Config(String),

    /// A prediction without a feature triple was passed where one is required.
    #[error("prediction carries no feature triple")]
    MissingFeatures,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
