pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod emit;
pub mod diffusion;
pub mod error;
pub mod flops;
pub mod model;
pub mod optim;
pub mod ratio;
pub mod rng;
pub mod routing;
pub mod tensor;

pub use error::{Error, Result};
