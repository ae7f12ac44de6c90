//! Multi-scale layer-attention temporal convolutional network for acoustic
//! echo cancellation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tape`] / [`tensor`]: dense tensors with reverse-mode differentiation.
//! * [`nn`]: PReLU, gLN/cLN, LSTM cell, dilated depthwise-separable blocks and
//!   multi-head layer attention.
//! * [`model`]: encoder, feature extractor, canceller and decoder, offline and
//!   streaming, plus the checkpoint format.
//! * [`datagen`]: echo-path synthesis and SER/SNR mixing.
//! * [`train`]: MSE loss, Adam, learning-rate schedule and early stopping.
//! * [`eval`]: ERLE, the external PESQ adapter and an NLMS baseline.

mod codec;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradcheck;
mod linalg;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use parallel::Executor;
pub use tape::{Conv1dSpec, NormKind, Tape, Var};
pub use tensor::Tensor;

/// Sample rate enforced by the data pipeline and the model.
pub const SAMPLE_RATE: u32 = 16_000;
