//! Ensemble quantile-regression surrogates with aleatoric/epistemic
//! uncertainty maps and an iterative acquisition loop that tells the two
//! kinds apart.

pub mod error;
pub mod losses;
pub mod nn;
pub mod seed;

pub use error::{Error, Result};
mod normal;
pub mod problems;
pub mod surrogates;
pub mod umap;
pub mod evalkit;
pub mod separation;
