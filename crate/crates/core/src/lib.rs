//! Convolutional image upscaling with MuxOut layers, plus tools that
//! linearize a trained network at fixed activations and extract its
//! space-variant interpolation filters.

pub mod analysis;
pub mod error;
pub mod netgraph;
pub mod pnm;
pub mod resample;
pub mod sampling;
pub mod systems;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
