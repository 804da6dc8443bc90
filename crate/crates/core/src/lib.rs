//! Dual text embedding GAN for text-to-image synthesis.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod losses;
pub mod model;
pub mod nn;
pub mod step;
pub mod text;
pub mod trainer;

pub use error::{DteError, Result};
