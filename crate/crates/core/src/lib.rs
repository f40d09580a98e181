pub mod cli;
pub mod collab;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod lm;
pub mod numerics;
pub mod rng;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{CkfError, Result};
