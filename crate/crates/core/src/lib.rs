pub mod assembler;
pub mod bench;
pub mod container;
pub mod error;
pub mod instrument;
pub mod model;
pub mod pipeline;
pub mod pool;
pub mod tensor;

pub use error::{Error, Result};
