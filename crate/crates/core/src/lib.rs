//! A small 1-bit neural network kit: XNOR-popcount convolution, binarized dual
//! residual layers, a reverse-mode tape with straight-through gradients, a
//! binarized box head and Params/OPs accounting.

pub mod autograd;
pub mod binarize;
pub mod boxnet;
pub mod error;
pub mod layers;
pub mod ops;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
