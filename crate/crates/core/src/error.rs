use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("undefined signal: every sample is zero")]
    UndefinedSignal,
    #[error("invalid quantization plan: {0}")]
    InvalidPlan(String),
    #[error("unsupported layer: {0}")]
    Unsupported(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
