//! Neural half of the change-data pipeline: the resolution-scalable diffusion
//! transformer, masked change sampling, dataset generation and a toy Siamese
//! change detector, all on candle tensors.

pub mod checkpoint;
pub mod codec;
pub mod condition;
pub mod datagen;
pub mod detector;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod params;
pub mod rsdit;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
