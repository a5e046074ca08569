pub mod augment;
pub mod dataio;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod model;
pub mod objectives;
pub mod relational;
pub mod tensor;

pub use error::{Error, Result};
