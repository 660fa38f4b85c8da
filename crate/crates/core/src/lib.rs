//! Invertible image fusion and decomposition.
//!
//! A stack of affine coupling blocks maps two co-registered grayscale images
//! to a fused image and a latent image. Because every block is exactly
//! invertible, the fused image together with a fresh latent draw can be
//! decomposed back into estimates of both sources.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod autodiff;
pub mod data;
pub mod flow;
pub mod latent;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type FlowModel64 = flow::FlowModel<f64>;
pub type FlowModel32 = flow::FlowModel<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type ImagePair64 = data::ImagePair<f64>;
pub type ImagePair32 = data::ImagePair<f32>;
