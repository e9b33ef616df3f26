pub mod autograd;
pub mod checkpoint;
pub mod cic;
pub mod cli;
pub mod config;
pub mod data;
pub mod decomposer;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod memory;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scoring;
pub mod sdl;
pub mod tensor;
pub mod train;

pub use error::{CrclError, Result};
pub use tensor::Tensor;
