pub mod checkpoint;
pub mod config;
pub mod control;
pub mod corpus;
pub mod diffusion;
pub mod dit;
pub mod encoder;
pub mod error;
pub mod extractor;
pub mod illusion;
pub mod metrics;
pub mod model;
pub mod par;
pub mod raster;
pub mod rng;
pub mod tensor;
pub mod view;

pub use error::{Error, Result};
