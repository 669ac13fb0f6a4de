//! Self-contained 3-D segmentation experiment engine: tensors with reverse-mode
//! autodiff, two convolutional architectures, losses, optimizers, a patch
//! sampling pipeline, cross-validation training, and statistical reporting.
//! Everything runs on the CPU with deterministic, seed-reproducible results.

pub mod config;
pub mod data;
pub mod diag;
pub mod error;
pub mod losses;
pub mod models;
pub mod optim;
pub mod sampler;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
