pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod losses;
pub mod model;
pub mod nn;
pub mod noise;
pub mod optim;
pub mod raster;
pub mod rng;
pub mod synthesis;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
