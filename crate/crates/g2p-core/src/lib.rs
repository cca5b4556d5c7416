//! Multilingual grapheme-to-phoneme (G2P) conversion toolkit.
//!
//! A single language-tagged transformer is trained over many languages at
//! once, decoded with a seed-by-checkpoint ensemble that averages per-step
//! prediction distributions under beam search, evaluated with WER/PER, and
//! optionally augmented by confidence-thresholded self-training over raw
//! text.
//!
//! The compute core is scalar-generic: `f32` for training and inference,
//! `f64` for finite-difference gradient verification.

pub mod data;
// pub mod decode;
pub mod error;
// pub mod eval;
pub mod graph;
pub mod model;
pub mod scalar;
// pub mod selftrain;
pub mod tensor;
// pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision tensor, the training/inference default.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used for gradient verification.
pub type Tensor64 = tensor::Tensor<f64>;
// TODO(scaffold): restore once model/decode land
// pub type Model32 = model::TransformerModel<f32>;
// /// Double-precision transformer.
// pub type Model64 = model::TransformerModel<f64>;
// /// Single-precision decoding ensemble.
// pub type Ensemble32 = decode::Ensemble<f32>;
