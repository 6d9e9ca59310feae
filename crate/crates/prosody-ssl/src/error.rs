use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input too short: {got} samples, need at least {need}")]
    InputTooShort { got: usize, need: usize },

    #[error("invalid intensity: tau must lie in (0, 1), got {0}")]
    InvalidIntensity(f64),

    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown token id {0} (vocabulary size {1})")]
    UnknownToken(u16, u16),

    #[error("no usable audio under {0}")]
    NoUsableAudio(PathBuf),

    #[error("bad wav file {path}: {reason}")]
    BadWav { path: PathBuf, reason: String },

    #[error("checkpoint integrity error: {0}")]
    CheckpointIntegrity(String),

    #[error("unsupported checkpoint version {got} (supported: {supported})")]
    UnsupportedVersion { got: u32, supported: u32 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
