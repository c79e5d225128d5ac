//! Limited-data GAN training with implicit adversarial semantic augmentation.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
