pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
