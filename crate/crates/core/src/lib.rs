pub mod adversary;
pub mod autograd;
pub mod checkpoint;
pub mod classifier;
pub mod codec;
pub mod config;
pub mod distortion;
pub mod eval;
pub mod filter;
mod error;
pub mod image;
pub mod nn;
pub mod surrogate;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
