pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod train;
pub mod tensor;
pub mod tree;

pub use error::{Error, Result};
