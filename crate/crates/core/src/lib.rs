pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod model;
pub mod reid;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
