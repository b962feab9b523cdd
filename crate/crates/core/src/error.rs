use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),

    #[error("source text is empty after truncation to {max_len} tokens")]
    EmptySource { max_len: usize },

    #[error("character range {start}..{end} overlaps no token")]
    Unaligned { start: usize, end: usize },

    #[error("invalid example: {0}")]
    InvalidExample(String),

    #[error("invalid label set: {0}")]
    LabelSet(String),

    #[error("invalid bucket spec: {0}")]
    BucketSpec(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("token id {id} out of range for table of {size} rows ({table})")]
    IdOutOfRange {
        table: &'static str,
        id: usize,
        size: usize,
    },

    #[error("source mask marks no position")]
    EmptyMask,

    #[error("gold index {0} is not a source position")]
    GoldMasked(usize),

    #[error("backward called without a cached forward pass")]
    NoCache,

    #[error("non-finite gradient in tensor {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {message}")]
    Dataset {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("length mismatch: {preds} predictions vs {golds} golds")]
    LengthMismatch { preds: usize, golds: usize },

    #[error("unknown task {0}")]
    UnknownTask(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Vocabulary(_) => "vocabulary",
            Error::EmptySource { .. } => "empty_source",
            Error::Unaligned { .. } => "unaligned",
            Error::InvalidExample(_) => "invalid_example",
            Error::LabelSet(_) => "label_set",
            Error::BucketSpec(_) => "bucket_spec",
            Error::Config(_) => "config",
            Error::IdOutOfRange { .. } => "id_out_of_range",
            Error::EmptyMask => "empty_mask",
            Error::GoldMasked(_) => "gold_masked",
            Error::NoCache => "no_cache",
            Error::NonFinite(_) => "non_finite",
            Error::Shape(_) => "shape",
            Error::Dataset { .. } => "dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::UnknownTask(_) => "unknown_task",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
