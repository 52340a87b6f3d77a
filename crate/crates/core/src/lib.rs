//! Learned block-based compressed sensing with a ternary sampling matrix.
//!
//! The crate implements the full pipeline: a learned convolutional sampling
//! layer whose weights are binarized and then pruned to {-alpha, 0, +alpha}
//! using an attention-derived importance map, a two-stage convolutional
//! reconstruction network (initial expansion + pixel shuffle, then a dilated
//! residual refinement stack), a bit-packed MAC-less execution path for the
//! ternary sampler, and the training/evaluation machinery around them.
//!
//! Core numerics are generic over the scalar type (`f32`/`f64`) through the
//! [`Scalar`] trait; the training pipeline runs in single precision while the
//! gradient-check suites instantiate the same code at double precision.

pub mod attention;
pub mod error;
pub mod pipeline;
pub mod recon;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod tensor;
pub mod ternary;

#[cfg(test)]
pub(crate) mod test_util;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision tensor, the type the training pipeline runs on.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used by the finite-difference suites.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision trainable parameter.
pub type Parameter32 = tensor::Parameter<f32>;
/// Double-precision trainable parameter.
pub type Parameter64 = tensor::Parameter<f64>;
// SamplingLayer32 / AtpNet32 aliases land with their modules.
