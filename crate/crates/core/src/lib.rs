//! Rotary position embeddings, phase-kernel analysis and attention over
//! mixed-resolution token grids.

pub mod attention;
pub mod boundary;
pub mod cli;
pub mod dump;
pub mod error;
pub mod kernel;
pub mod posmap;
pub mod probe;
pub mod rope;
pub mod sim;
pub mod tensor;

pub use error::{Error, Result};
