pub mod error;
pub mod ctr;
pub mod data;
pub mod eval;
pub mod numeric;
pub mod plm;
pub mod prompt;
pub mod nn;
pub mod rng;
pub mod pipeline;
pub mod train;
pub mod checkpoint;
pub mod cli;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
