//! Logit-lens analysis and activation replay on paired toy multimodal
//! transformers.

pub mod container;
pub mod error;
pub mod lens;
pub mod model;
pub mod replay;
pub mod rng;
pub mod studies;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
