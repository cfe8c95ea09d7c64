pub mod checkpoint;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod image;
pub mod losses;
pub mod model;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
pub use image::Image;
