pub mod error;
pub mod exec;
pub mod tensor;

pub use error::{Error, Result};
pub mod gradcheck;
pub mod imageops;
pub mod maskgen;
pub mod model;
pub mod losses;
pub mod metrics;
pub mod trainer;
pub mod suites;
