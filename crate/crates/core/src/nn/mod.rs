//! Minimal reverse-mode layer kernels for the lung network.
//!
//! Every layer is a pair of free functions: `*_forward` returns its output
//! together with whatever the matching `*_backward` needs, and `*_backward`
//! maps an upstream gradient to gradients of the inputs and parameters.
//! Kernels are generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference checks. Batch samples are
//! processed in parallel and reduced in sample order, which keeps results
//! bit-identical for any thread count.

pub mod activation;
pub mod adam;
pub mod conv;
pub mod norm;
mod tensor;

pub use activation::{
    relu_backward, relu_forward, residual_add_backward, residual_add_forward, softmax2_backward,
    softmax2_forward,
};
pub use adam::{Adam, AdamConfig};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvSpec};
pub use norm::{instance_norm_backward, instance_norm_forward, NormCache, NormGrads, NORM_EPS};
pub use tensor::{Scalar, Tensor4};
