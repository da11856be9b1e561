pub mod boxdet;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod micronet;
pub mod raster;
pub mod refine;
pub mod targets;
pub mod trainer;

pub use error::{Error, Result};
