//! Identity-consistent rendering-to-realistic portrait transfer: generator
//! pair fine-tuning, W+ inversion, cross-generator decoding, compositing and
//! evaluation.

pub mod compositing;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod finetune;
pub mod generators;
pub mod imaging;
pub mod inference;
pub mod inversion;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod selftest;
pub mod tensor_file;

pub use candle_core::{DType, Device, Tensor};
pub use error::{Error, Result};
