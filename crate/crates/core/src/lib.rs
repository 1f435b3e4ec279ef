pub mod binops;
pub mod checkpoint;
pub mod cli;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod evosearch;
pub mod harness;
pub mod nn;
pub mod presets;
pub mod searchspace;
pub mod supernet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
