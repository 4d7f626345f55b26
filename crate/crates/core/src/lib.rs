//! Batch normalization for recurrent networks, built on a small reverse-mode
//! autodiff core.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod normalization;
pub mod persistence;
pub mod recurrent;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
