//! Task-driven coarse-to-fine inpainting for occluded geoscience imagery.
//!
//! A coarse encoder-decoder fills the occluded region, a second network
//! predicts a residual correction, and training combines reconstruction,
//! perceptual, adversarial and frozen-task losses.

pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;
pub mod vgg;

pub use error::{Error, Result};
