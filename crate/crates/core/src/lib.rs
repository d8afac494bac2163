//! Cross-domain feature normalization with reciprocal statistic exchange,
//! plus the training, data, and analysis machinery around it.

pub mod data;
pub mod analysis;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod layercheck;
pub mod model;
pub mod norm;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
