use thiserror::Error;

/// Errors produced by every stage of the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("antenna index {index} out of range for array of {count} elements")]
    AntennaIndexOutOfRange { index: usize, count: usize },

    #[error("point coincides with antenna element {0}")]
    CoincidentPoint(usize),

    #[error("trajectory has {found} frames, expected {expected}")]
    TrajectoryLength { expected: usize, found: usize },

    #[error("cube contains no samples")]
    EmptyCube,

    #[error("plane mismatch: {0}")]
    PlaneMismatch(String),

    #[error("lag {lag} must be in 1..{frames}")]
    InvalidLag { lag: usize, frames: usize },

    #[error("point at depth {0} is at or behind the projection center")]
    BehindProjectionCenter(f64),

    #[error("triangulation needs at least 2 views, got {0}")]
    NotEnoughViews(usize),

    #[error("triangulation system is rank deficient (parallel or identical rays)")]
    RankDeficient,

    #[error("cannot form {clusters} clusters from {points} points")]
    TooFewPoints { clusters: usize, points: usize },

    #[error("box has zero or negative area")]
    EmptyBox,

    #[error("box does not intersect the canvas")]
    BoxOutsideCanvas,

    #[error("CFAR window of half-width {half_width} exceeds {width}x{height} grid")]
    RingExceedsGrid {
        half_width: usize,
        width: usize,
        height: usize,
    },

    #[error("height range [{0}, {1}] is empty or inverted")]
    InvalidHeightRange(f64, f64),

    #[error("{what}: lengths differ ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed RLE: {0}")]
    MalformedRle(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
