//! Face-feature-embedded CycleGAN for visible (VIS) to near-infrared (NIR)
//! face translation, with the training, synthetic-data and verification
//! tooling around it.
//!
//! Networks are plain parameter sets evaluated on the reverse-mode tape in
//! [`tensor`]; every module exposes both graph-building functions (used for
//! training) and tensor-in/tensor-out convenience wrappers.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod losses;
mod nn;
pub mod optim;
pub mod training;

pub use config::Config;
pub use error::{Error, Result};
pub use nirgan_tensor as tensor;
