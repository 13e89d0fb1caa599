//! Test-time attention steering for a toy multimodal decoder.
//!
//! The crate implements inference-time latent-variable optimization for
//! injecting visual prompts (box, mask, scribble, point) into a miniature
//! transformer decoder, plus the machinery around it: a tape-based autodiff
//! engine, prompt geometry, an edit-attention baseline, relevancy maps, and
//! a synthetic referring-classification harness.

pub mod config;
pub mod edit;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod io;
pub mod model;
pub mod relevancy;
pub mod steering;
pub mod tape;
pub mod tensor;

pub use error::{Result, SteerError};
pub use tensor::Tensor;
