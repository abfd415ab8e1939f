pub mod error;
pub mod eval;
pub mod frontend;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
