//! A shared decoder-only language model steered to several generation tasks
//! by per-task residual adapters and segment embeddings.

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
mod config;
pub mod decode;
pub mod distill;
mod error;
pub mod eval;
pub mod experiment;
pub mod json;
pub mod metrics;
pub mod model;
mod params;
pub mod report;
pub mod synth;
pub mod task;
pub mod tokenizer;
pub mod train;

pub use config::{ModelConfig, EOS_ID, PAD_ID, SEP_ID, UNK_ID};
pub use error::{Result, VlmError};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;
