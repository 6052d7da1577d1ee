pub mod concentration;
pub mod curve;
pub mod data;
pub mod denoise;
pub mod error;
mod mc;
pub mod sampler;
pub mod schedule;
pub mod shells;
pub mod spectral;
mod vecmath;

pub use error::{Error, Result};
pub use mc::Estimate;
