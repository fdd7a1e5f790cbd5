//! Differentially private tabular data synthesis with a generator trained
//! against an ensemble of teacher discriminators whose perturbation votes are
//! aggregated with confident-GNMax.

pub mod accountant;
pub mod aggregator;
pub mod data;
pub mod error;
pub mod eval;
pub mod neural;
pub mod projection;
pub mod run;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
