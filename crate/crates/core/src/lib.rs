//! Hierarchical vision-language fusion for face forgery detection.
//!
//! A frozen image/text dual encoder is adapted with learnable prompt banks
//! and a small fusion module that injects multi-level visual features into
//! the text prompts. Only the prompts and the fusion module are trained.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod gradsuite;
pub mod model;
pub mod objective;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{no_grad, Scalar, Tensor};
