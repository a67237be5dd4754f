use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the failure-detection stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("placement failed: could not place {objects} objects collision-free after {attempts} attempts")]
    Placement { objects: usize, attempts: usize },

    #[error("horizon too short: script for `{task}` needs {needed} steps, horizon is {horizon}")]
    Horizon {
        task: String,
        needed: usize,
        horizon: usize,
    },

    #[error("task `{task}` is not achievable in this state: {reason}")]
    NotAchievable { task: String, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("ragged grid: {0}")]
    Ragged(String),

    #[error("category `{0}` has a single task and cannot yield negatives")]
    SingleTaskCategory(String),

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceOverflow { len: usize, max: usize },

    #[error("LoRA adapters already merged")]
    AdaptersConsumed,

    #[error("invalid target token id {0}: expected <success> or <fail>")]
    InvalidTarget(u32),

    #[error("numerical guard: {0}")]
    Numerical(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {loss}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("empty split `{0}`")]
    EmptySplit(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("feature cache keyed by {cache} does not match model {model}")]
    CacheMismatch { cache: String, model: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
