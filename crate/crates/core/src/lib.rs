//! Adaptive masked autoencoder for a variable number of 3D modalities.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the 64-bit instantiation used for training and gradient checks.

pub mod autograd;
pub mod data;
pub mod dct;
pub mod embed;
pub mod error;
pub mod eval;
pub mod mae;
pub mod params;
pub mod recon;
pub mod scalar;
pub mod seed;
pub mod seg;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, ParseError, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = autograd::Graph<f64>;
pub type Params = params::Params<f64>;
