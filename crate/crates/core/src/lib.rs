pub mod cli;
pub mod config;
pub mod datasets;
pub mod encoders;
pub mod episodes;
pub mod evaluation;
pub mod error;
pub mod icl;
mod nn;
pub mod pretraining;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
