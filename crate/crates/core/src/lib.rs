pub mod autotune;
pub mod bench;
pub mod cli;
pub mod error;
pub mod executor;
pub mod fused;
pub mod swiglu;
pub mod tensor;
pub mod tp;
pub mod traffic;
pub mod verify;

pub use error::{Error, Result};
