//! Staged, class-balanced curriculum knowledge distillation on a small
//! CPU neural network stack.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod curriculum;
pub mod data;
mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
