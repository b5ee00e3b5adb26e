pub mod cli;
pub mod discriminators;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod story;
pub mod training;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
