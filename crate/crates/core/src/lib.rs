//! Differentially private training with fast per-example gradient clipping.
//!
//! Per-example gradient norms are reconstructed from the gradients of
//! retained layer pre-activations and the cached layer inputs, then used to
//! reweight each example's loss so that a single batch backward pass yields
//! the sum of clipped per-example gradients.

// Negated float comparisons are how NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod bench;
pub mod clipping;
pub mod data;
pub mod error;
pub mod layers;
pub mod model;
pub mod privacy;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
