//! Adversarial semi-supervised semantic segmentation at desk scale.
//!
//! A segmentation network is trained with cross entropy on labeled images,
//! an adversarial term from a fully convolutional discriminator, and a
//! self-taught cross entropy on unlabeled pixels the discriminator trusts.

pub mod checkpoint;
pub mod data;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fsio;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod ops;
pub mod real;
pub mod resample;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
