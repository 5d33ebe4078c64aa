//! Unsupervised salient object detection trained end to end.
//!
//! A shared encoder feeds two heads. The contrastive self-localizer learns a
//! class-agnostic activation map by contrasting pooled foreground and
//! background descriptors across the images of a batch. Its fused map (the
//! location label) is refined with image-adaptive affinities into a detailed
//! label, small spurious objects are suppressed by an area-ratio rule, and
//! the resulting pseudo-labels supervise a top-down saliency decoder.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for the common cases.

pub mod archive;
pub mod autodiff;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod io;
pub mod localizer;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod refiner;
pub mod scalar;
pub mod tensor;
pub mod types;
pub mod unss;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;

pub type Model32 = pipeline::Model<f32>;
pub type Model64 = pipeline::Model<f64>;
