//! Pixel-wise contextual attention (PiCANet) and a saliency network built
//! on it, with a small tape-based autograd engine underneath.

pub mod attention;
pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Shape, Tensor};
