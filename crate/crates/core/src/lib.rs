pub mod clustering;
pub mod error;
pub mod format;
pub mod inference;
pub mod model;
pub mod perf;
pub mod tensor;

pub use error::{Error, Result};
