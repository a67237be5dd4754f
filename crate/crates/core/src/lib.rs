//! Failure detection for language-conditioned manipulation.

pub mod arbitration;
pub mod backbone;
pub mod dataset;
pub mod error;
pub mod evalcli;
pub mod fs_blocks;
pub mod nn;
pub mod training;
pub mod worldgen;

pub use error::{Error, Result};
