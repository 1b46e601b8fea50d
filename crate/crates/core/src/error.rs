use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown word `{0}` (not in the lexicon)")]
    UnknownWord(String),
    #[error("prompt has no noun tokens")]
    NoNounTokens,
    #[error("malformed lexicon line {line}: {reason}")]
    Lexicon { line: usize, reason: String },
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("prompt of {len} tokens exceeds the model limit of {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("checksum mismatch for {what}")]
    ChecksumMismatch { what: String },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invalid timestep strategy: {0}")]
    InvalidStrategy(String),
    #[error("timestep {t} outside [{lo}, {hi}]")]
    InvalidTimestep { t: usize, lo: usize, hi: usize },
    #[error("timesteps must be strictly increasing and within range")]
    InvalidTimesteps,
    #[error("no attention records to aggregate")]
    EmptyRecords,
    #[error("attention records mix branches or timesteps")]
    MixedProvenance,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("adapter target `{0}` not found in the model")]
    TargetNotFound(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no trained model at {}", .0.display())]
    UntrainedModel(PathBuf),
    #[error("at least two images are required")]
    TooFewImages,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("png encoding failed: {0}")]
    Png(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ctcal_autodiff::ShapeError> for Error {
    fn from(e: ctcal_autodiff::ShapeError) -> Self {
        Error::ShapeMismatch(e.to_string())
    }
}

impl From<png::EncodingError> for Error {
    fn from(e: png::EncodingError) -> Self {
        Error::Png(e.to_string())
    }
}

impl Error {
    /// Process exit status for command-line use: 2 for bad input or configuration, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::UnknownWord(_)
            | Error::NoNounTokens
            | Error::Lexicon { .. }
            | Error::InvalidScene(_)
            | Error::PromptTooLong { .. }
            | Error::InvalidStrategy(_)
            | Error::InvalidTimestep { .. }
            | Error::InvalidTimesteps
            | Error::TargetNotFound(_)
            | Error::Config(_) => 2,
            _ => 3,
        }
    }
}
