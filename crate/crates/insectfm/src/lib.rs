//! File formats, checkpoints, configuration and the command line for
//! [`insectfm_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod imagestore;
pub mod jsonl;
pub mod manifest;
pub mod models;

pub use error::{Error, Result};
pub use insectfm_core as core;
