//! A small convolutional-network engine: tensors and layers with manual
//! backward passes, a model zoo of residual classifiers and a single-box
//! detector, training and evaluation, footprint auditing, and deterministic
//! synthetic data with simple on-disk formats.

pub mod blocks;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use data::Rng;
pub use error::{Error, Result};
pub use layers::{ArchGraph, Mode};
pub use tensor::{Shape, Tensor};
pub use zoo::{ModelKind, ModelSpec};
