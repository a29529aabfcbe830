//! Synthetic data, the fixed-codebook patch tokenizer, and raster I/O.

mod codebook;
pub mod dataset;
pub mod raster;

pub use codebook::{decode_tokens, encode_raster, Codebook, TokenGrid};
pub use dataset::{generate_dataset, DataConfig, ShapeSample, Split};
pub use raster::{load_raster, save_raster, Raster};
