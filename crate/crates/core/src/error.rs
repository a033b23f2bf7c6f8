use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("malformed action block at slot {slot} ({name}): {reason}")]
    MalformedBlock {
        slot: usize,
        name: &'static str,
        reason: String,
    },

    #[error("invalid token {id} at grid position ({row}, {col}); codebook has {limit} entries")]
    InvalidToken {
        row: usize,
        col: usize,
        id: u32,
        limit: usize,
    },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("unparseable frame: {0}")]
    UnparseableFrame(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("corrupt clip: pair {pair}: {reason}")]
    CorruptClip { pair: usize, reason: String },

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("incompatible vocabulary: expected fingerprint {expected:016x}, found {found:016x}")]
    IncompatibleVocabulary { expected: u64, found: u64 },

    #[error("context exceeded: {needed} positions requested, model supports {max}")]
    ContextExceeded { needed: usize, max: usize },

    #[error("training diverged at step {step}: loss {loss} (lr {lr})")]
    Diverged { step: usize, loss: f32, lr: f32 },

    #[error("clip {seed}: {source}")]
    InClip {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn corrupt_file(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::CorruptFile {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable code, used by the session protocol and the C API.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::MalformedBlock { .. } => "malformed_block",
            Error::InvalidToken { .. } => "invalid_token",
            Error::InsufficientData(_) => "insufficient_data",
            Error::UnparseableFrame(_) => "unparseable_frame",
            Error::Config(_) => "config",
            Error::CorruptClip { .. } | Error::CorruptFile { .. } => "corruption",
            Error::IncompatibleVocabulary { .. } => "incompatible_vocabulary",
            Error::ContextExceeded { .. } => "context_exceeded",
            Error::Diverged { .. } => "diverged",
            Error::InClip { source, .. } => source.code(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
