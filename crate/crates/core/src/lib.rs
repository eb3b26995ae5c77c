//! Dual-loss adaptive masked autoencoder pretraining for multi-channel
//! cell images, built on a small reverse-mode autodiff engine.

// Validation writes `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod mask;
pub mod model;
pub mod optim;
pub mod patch;
pub mod tensor;
pub mod train;

pub use error::{DamaError, Result};
