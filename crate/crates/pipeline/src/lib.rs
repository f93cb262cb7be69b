//! Data preparation, the coarse and fine training stages, checkpoints and
//! evaluation for the separation model in `avsep-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod infer;
pub mod manifest;
pub mod optim;
pub mod synth;
pub mod train;

pub use error::{PipelineError, Result};
