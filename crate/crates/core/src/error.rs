use thiserror::Error;

/// Errors produced anywhere in the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty allowed set")]
    EmptyAllowedSet,

    #[error("padding capacity exceeded: {count} intervals, capacity {capacity}")]
    PaddingCapacityExceeded { count: usize, capacity: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("stale forward cache")]
    StaleCache,

    #[error("map too crowded: could not place obstacle {index} after {attempts} attempts")]
    MapTooCrowded { index: usize, attempts: usize },

    #[error("episode finished")]
    EpisodeFinished,

    #[error("action {action} outside action range [{min}, {max}]")]
    ActionOutOfRange { action: f64, min: f64, max: f64 },

    #[error("not enough samples: requested {requested}, available {available}")]
    NotEnoughSamples { requested: usize, available: usize },

    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("empty search space")]
    EmptySearchSpace,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
