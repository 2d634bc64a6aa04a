//! Continuous masked autoregressive motion generation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`], [`gradcheck`], [`params`], [`nn`]: a small dense
//!   `f64` tensor library with reverse-mode autodiff and finite-difference
//!   checking.
//! * [`motion`], [`mask`], [`synth`]: motion sequences, mask schedules and a
//!   deterministic synthetic corpus.
//! * [`autoencoder`]: the convolutional motion tokenizer.
//! * [`condition`]: text and audio condition encoders.
//! * [`transformer`]: the causal masked transformer producing per-token
//!   conditions.
//! * [`diffusion`]: noise schedule, denoising heads, loss, sampling and
//!   guidance.
//! * [`train`], [`infer`], [`eval`], [`ablation`]: run orchestration.

pub mod ablation;
pub mod autoencoder;
pub mod condition;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod mask;
pub mod motion;
pub mod optim;
pub mod nn;
pub mod params;
pub mod synth;
pub mod model;
pub mod tape;
pub mod train;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::Tensor;
