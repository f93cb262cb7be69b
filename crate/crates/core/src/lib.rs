//! Coarse-to-fine audio-visual speech separation: signal processing, a small
//! tape autograd, the network modules and the training objectives.

pub mod audio_encoder;
pub mod dsp;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod mst;
pub mod nn;
pub mod objectives;
pub mod scalar;
pub mod semantics;
pub mod sp_fusion;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Waveform32 = dsp::Waveform<f32>;
pub type Waveform64 = dsp::Waveform<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type ParamStore32 = tensor::ParamStore<f32>;
pub type ParamStore64 = tensor::ParamStore<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
