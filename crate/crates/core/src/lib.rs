//! Hyperbolic hierarchy embeddings on top of a selective state-space encoder.

pub mod autograd;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod hierarchy;
pub mod model;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};
