use thiserror::Error;

/// Crate-wide error type. Variants mirror the failure classes the pipeline
/// contracts name explicitly (shape mismatches, frozen-state violations,
/// checkpoint format faults) so callers can match on them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("timestep {tau} out of range [0, {t_diff})")]
    TimestepOutOfRange { tau: usize, t_diff: usize },

    #[error("teacher is not frozen: {0}")]
    UnfrozenTeacher(String),

    #[error("frozen-parameter violation: {0}")]
    FrozenViolation(String),

    #[error("teacher not available: {0}")]
    TeacherNotAvailable(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("truncated checkpoint file: {0}")]
    TruncatedFile(String),

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("unsolvable scene layout: {0}")]
    UnsolvableLayout(String),

    #[error("environment step failed: {0}")]
    EnvStep(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
