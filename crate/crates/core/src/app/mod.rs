//! Command-line and HTTP front ends over the training and inference stages.

pub mod checkpoint;
pub mod config;
pub mod pipeline;
pub mod service;

pub use checkpoint::{Checkpoint, CheckpointMeta, Stage};
pub use config::RunConfig;
pub use pipeline::{EvalOutcome, InferenceModels, Pipeline, VqQuality};
