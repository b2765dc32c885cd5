pub mod attacks;
pub mod datasets;
pub mod detection;
pub mod error;
pub mod models;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
