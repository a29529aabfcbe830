//! Masked generative token modeling on synthetic token grids, with
//! attention-guided parallel decoding that steers samples toward the spatial
//! layout of a guide grid.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod parallel;
pub mod rejection;
pub mod rng;
pub mod sampler;
pub mod structure;
pub mod tensor;
pub mod tokens;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
