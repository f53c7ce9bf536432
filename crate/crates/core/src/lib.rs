//! Tile-wise sparsity for weight graphs: tile importance, global tile
//! pruning, function-preserving row permutations, and verification oracles.

pub mod cli;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod importance;
pub mod oracle;
pub mod pruner;
pub mod reparam;
pub mod tensor;

pub use error::{Error, Result};
