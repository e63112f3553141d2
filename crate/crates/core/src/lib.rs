//! ConvFormer: a convolutional spatio-temporal transformer that lifts
//! sequences of 2D joint detections to a root-relative 3D pose for the
//! central frame.
//!
//! The crate carries its own small reverse-mode differentiation engine
//! ([`graph`]), the dynamic multi-headed convolutional self-attention layer
//! ([`attention`]), the full lifting network with its parameter and FLOP
//! accountant ([`model`]), evaluation protocols ([`metrics`]), pose-sequence
//! data handling ([`data`]) and the training loop ([`trainer`]).

pub mod attention;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Packing, Var};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tensor::Tensor;
