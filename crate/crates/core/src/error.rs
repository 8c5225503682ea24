use thiserror::Error;
use vlm_tensor::TensorError;

pub type Result<T> = std::result::Result<T, VlmError>;

#[derive(Debug, Error)]
pub enum VlmError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("sequence of length {len} exceeds the maximum context {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("segment id {id} out of range for {segments} segments")]
    SegmentOutOfRange { id: u32, segments: usize },

    #[error("task {task}: {reason}")]
    Encode { task: String, reason: String },

    #[error("unknown task {0:?}")]
    UnknownTask(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("training diverged at step {step} (task {task}): loss is {loss}")]
    Diverged { step: usize, task: String, loss: f64 },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
