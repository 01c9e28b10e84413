pub mod augment;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
