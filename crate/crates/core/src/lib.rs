//! Key/query channel pruning for linear-attention style mixers.

pub mod diagnostics;
pub mod error;
pub mod grad;
pub mod linalg;
pub mod mixers;
pub mod pruning;
pub mod random;
pub mod tasks;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Matrix;
