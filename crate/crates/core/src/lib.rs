pub mod diff;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod instance;
pub mod linsat;
pub mod problems;
pub mod sampling;
pub mod solver;

pub use error::{Error, Result};
