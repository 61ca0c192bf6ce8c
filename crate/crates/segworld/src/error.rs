use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. Variants are named after the contract they enforce.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed RLE: {reason}")]
    MalformedRle { reason: String },

    #[error("dimension mismatch: expected {expected_width}x{expected_height}, got {actual_width}x{actual_height}")]
    DimensionMismatch {
        expected_width: usize,
        expected_height: usize,
        actual_width: usize,
        actual_height: usize,
    },

    #[error("ground-truth mask is empty")]
    EmptyGroundTruth,

    #[error("empty evaluation: no records")]
    EmptyEvaluation,

    #[error("empty input")]
    EmptyInput,

    #[error("decode overflow in level {level}: budget {budget} exhausted")]
    DecodeOverflow { level: String, budget: usize },

    #[error("decoding terminated without emitting [SEG]")]
    NoSegToken,

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("sample {sample_id} has no synthesized observation context")]
    MissingSynthesizedContext { sample_id: String },

    #[error("sample {sample_id} has no intent instruction but intent_mix > 0")]
    MissingIntentInstruction { sample_id: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("sample {sample_id} is missing base_image_id")]
    MissingBaseImageId { sample_id: String },

    #[error("context generator failed: {reason}")]
    GeneratorFailure { reason: String },

    #[error("cannot read {path}: {source}")]
    UnreadableFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid sample {sample_id}: {reason}")]
    InvalidSample { sample_id: String, reason: String },

    #[error("invalid vocabulary: {reason}")]
    InvalidVocabulary { reason: String },

    #[error("invalid config: {reason}")]
    InvalidConfig { reason: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
