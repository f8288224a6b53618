use std::path::PathBuf;

/// Errors produced across the facemotion pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-scalar loss of shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("not a corpus frame file: {0}")]
    BadMagic(PathBuf),

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    UnsupportedVersion { path: PathBuf, found: u32, expected: u32 },

    #[error("length mismatch for clip {clip_id}: {detail}")]
    LengthMismatch { clip_id: String, detail: String },

    #[error("corrupt {what}: {detail}")]
    Corrupt { what: String, detail: String },

    #[error("checksum mismatch for tensor {0}")]
    Checksum(String),

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("token id {id} outside of range [0, {limit})")]
    TokenOutOfRange { id: usize, limit: usize },

    #[error("sequence too long: {len} exceeds {limit}")]
    TooLong { len: usize, limit: usize },

    #[error("sequence too short: {len} frames, need at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("prompt is empty after normalization")]
    EmptyPrompt,

    #[error("missing dependency: {0}")]
    MissingStage(String),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("I/O error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
