use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the codec, training and harness layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("argument error: {0}")]
    Argument(String),

    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("symbol range error: {0}")]
    Range(String),

    #[error("corrupted bitstream (substream {substream}): {reason}")]
    Corruption { substream: usize, reason: String },

    #[error("unsupported intra codec id {0}")]
    UnsupportedCodec(u8),

    #[error("no overlap between the quality ranges of the two RD curves")]
    Overlap,

    #[error("training diverged at step {step} (stage {stage}): {snapshot}")]
    NanLoss { step: usize, stage: u8, snapshot: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn corrupt(substream: usize, reason: impl Into<String>) -> Self {
        Error::Corruption { substream, reason: reason.into() }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Contract(_) | Error::Parameter(_) => 2,
            Error::MalformedInput(_)
            | Error::EmptyInput(_)
            | Error::Corruption { .. }
            | Error::Range(_)
            | Error::Overlap
            | Error::Io { .. }
            | Error::Image(_)
            | Error::Json(_)
            | Error::NanLoss { .. }
            | Error::Tensor(_) => 3,
            Error::Config(_) | Error::UnsupportedCodec(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
