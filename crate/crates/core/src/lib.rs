//! Density-ratio weighting for tabular offline RL on imbalanced datasets.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod mdp;
pub mod offline_rl;
pub mod optim;
pub mod rng;
pub mod sampling;
pub mod weighting;

pub use error::{Error, Result};
