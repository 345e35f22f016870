pub mod agents;
pub mod env;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod intervals;
pub mod nn;
pub mod replay;
pub mod rng;

pub use error::{Error, Result};
