//! Parametric image enhancement: a small CNN predicts a filter kernel, a
//! color matrix and a color shift, and a differentiable warping stage applies
//! them. The enhancer is trained end-to-end through a frozen classifier with
//! an exponential-moving-average shadow as regularizer.
//!
//! Numerical code is generic over [`Scalar`] (`f32` for training and
//! inference, `f64` for gradient oracles); the aliases below name the
//! concrete instantiations.

pub mod checkpoint;
pub mod corruptions;
pub mod dwm;
pub mod evaluation;
pub mod gradcheck;
pub mod imaging;
pub mod layers;
pub mod nem;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use scalar::Scalar;

#[cfg(test)]
mod testutil;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type ModelState32 = tensor::ModelState<f32>;
pub type ModelState64 = tensor::ModelState<f64>;
