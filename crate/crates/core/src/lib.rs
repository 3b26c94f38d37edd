//! Kernelized softmax output layers for contextual word classification.
//!
//! The inner product in a softmax output layer is replaced by one of nine
//! kernel scoring functions, optionally combined as a context-gated mixture
//! of per-kernel softmaxes over a shared word matrix. Around the layer sit a
//! feedforward n-gram context encoder, a corpus/batching pipeline, a trainer
//! with checkpointing and grid search, and evaluation tools (perplexity,
//! kernel profile curves, a neighbor/disambiguation probe).
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! and `*32` aliases below name the concrete instantiations.

pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod output_layer;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type KernelSpec64 = kernels::KernelSpec<f64>;
pub type KernelSpec32 = kernels::KernelSpec<f32>;
pub type GaussianParams64 = kernels::GaussianParams<f64>;
pub type MixtureConfig64 = output_layer::MixtureConfig<f64>;
pub type MixtureConfig32 = output_layer::MixtureConfig<f32>;
pub type OutputParams64 = output_layer::OutputParams<f64>;
pub type OutputParams32 = output_layer::OutputParams<f32>;
pub type EncoderParams64 = encoder::EncoderParams<f64>;
pub type LanguageModel64 = model::LanguageModel<f64>;
pub type LanguageModel32 = model::LanguageModel<f32>;
pub type TrainConfig64 = training::TrainConfig<f64>;
pub type TrainState64 = training::TrainState<f64>;
pub type TrainState32 = training::TrainState<f32>;
