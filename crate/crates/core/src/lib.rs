//! Desk-scale micro-feature foundation model training.
//!
//! The crate is `no_std` with `alloc`. It holds everything that is pure
//! computation: a small reverse-mode autodiff engine over `f64` matrices, the
//! vision and text transformers, patch pooling with the patch-wise relevance
//! pretext task, image-text alignment losses, a toy visual assistant, the
//! instruction-data pipeline, and the evaluation harness. File formats, the
//! checkpoint container and the command line live in the `insectfm` crate.
#![no_std]

extern crate alloc;

pub mod alignment;
pub mod assistant;
pub mod autograd;
pub mod dataset;
pub mod encoders;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod instruct;
pub mod math;
pub mod nn;
pub mod optim;
pub mod params;
pub mod patching;
pub mod prs;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::Mat;
