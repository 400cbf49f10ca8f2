//! Fixed points of multi-type branching-process generating functions,
//! conjugate (tilted) processes, and truncation analysis of countable-type
//! families.

pub mod basins;
pub mod bundled;
pub mod cli;
pub mod conjugate;
pub mod countable;
pub mod error;
pub mod fixedpoint;
pub mod model;
pub mod rational;
pub mod simulate;
pub mod spectral;

#[cfg(test)]
mod test_models;

pub use error::{Error, Result};
pub use model::ProcessModel;
