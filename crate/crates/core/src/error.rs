use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {field}")]
    InvalidConfig { field: &'static str },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("unknown variant `{value}` for {kind}")]
    UnknownVariant { kind: &'static str, value: String },

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("invalid flip rate {0}: must lie in [0, 1]")]
    InvalidRate(f64),

    #[error("dataset already contains flipped pairs")]
    AlreadyFlipped,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("timestep {t} outside [{lo}, {hi}]")]
    OutOfRange { t: usize, lo: usize, hi: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("stability needs at least 2 checkpoints, got {0}")]
    InsufficientCheckpoints(usize),

    #[error("scores need at least one flipped and one clean entry")]
    DegenerateClasses,

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
