//! Keyword spotting with a hybrid DNN-HMM whose state classifier can be
//! trained end to end through the Viterbi decoder.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the training and evaluation pipeline.

mod binfmt;
pub mod decoder;
pub mod dnn;
pub mod e2e;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod hmm;
pub mod corpus;
pub mod optim;
pub mod synth;
pub mod trainer;
pub mod sampling;
pub mod scalar;

pub use error::{KwsError, Result};
pub use scalar::Scalar;

/// Double-precision network parameters used for training.
pub type Dnn = dnn::DnnParams<f64>;
/// Single-precision network parameters as stored in checkpoints.
pub type DnnF32 = dnn::DnnParams<f32>;
pub type Hmm = hmm::HmmParams<f64>;
pub type HmmF32 = hmm::HmmParams<f32>;
pub type Features = features::FrameFeatures<f64>;
pub type Detection = decoder::Detection<f64>;
