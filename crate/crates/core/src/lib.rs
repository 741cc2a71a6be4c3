//! Latent-space generative segmentation.
//!
//! Images and masks are mapped to latents by a frozen tokenizer, a small
//! trainable latent mapping model turns image latents into mask latents, and
//! the frozen decoder brings the prediction back to image space.

pub mod archive;
pub mod data;
pub mod error;
pub mod fpenv;
pub mod lmm;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{GmsError, Result};
pub use scalar::Scalar;
pub use tensor::{Gradients, Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
