//! Multimodal prompt tuning on a frozen miniature CLIP-style dual encoder.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod encoder;
mod error;
pub mod harness;
pub mod pftensor;
pub mod prompts;
pub mod tensor;

pub use error::{BatchDump, Error, Result};
pub use tensor::{Scalar, Tensor};
