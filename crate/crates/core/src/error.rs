use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("not found: {0}")]
    NotFound(PathBuf),

    #[error("schema version mismatch: found {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("checksum mismatch in {0}")]
    Checksum(String),

    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tier {tier} unachievable for {frames} frame(s) after {attempts} attempts")]
    TierUnachievable {
        tier: String,
        frames: usize,
        attempts: usize,
    },

    #[error("token {token} out of vocabulary (size {vocab_size})")]
    OutOfVocab { token: u32, vocab_size: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("frame count mismatch: expected {expected}, found {found}")]
    FrameMismatch { expected: usize, found: usize },

    #[error("plugin failed: {0}")]
    Plugin(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub fn malformed(what: impl Into<String>, detail: impl std::fmt::Display) -> Self {
        Error::Malformed {
            what: what.into(),
            detail: detail.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
