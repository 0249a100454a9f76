//! hyseg: a hybrid state-space / transformer network for volumetric
//! semantic segmentation, built on a from-scratch reverse-mode autodiff
//! engine, with an analytic complexity accountant and a synthetic-phantom
//! training harness.
//!
//! The numeric core is generic over the scalar type: `f64` is the
//! verification dtype (finite-difference gradient checks), `f32` the
//! training dtype. Concrete aliases are exported at the crate root.

pub mod checkpoint;
pub mod cli;
pub mod complexity;
pub mod error;
pub mod scalar;
pub mod attention;
pub mod embedding;
pub mod gradsuite;
pub mod network;
pub mod nn;
pub mod ssm;
pub mod svf;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::{no_grad, GradCtx, GradFn, NoGradGuard, Tensor};

/// Training-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = Tensor<f64>;
