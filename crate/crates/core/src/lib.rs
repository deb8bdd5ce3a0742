//! Semantic image editing with a two-stream discriminator.

pub mod checkpoint;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
