//! Conservative data sharing for multi-task offline RL on tabular MDPs.
//!
//! Everything here is exact: MDPs are small enough that policy values,
//! occupancies and bound terms are computed by linear solves, so every learner
//! and sharing rule can be checked against a brute-force oracle.

pub mod analysis;
pub mod config;
pub mod dataset;
pub mod datagen;
pub mod envs;
pub mod error;
pub mod harness;
pub mod learner;
pub mod mdp;
pub mod rng;
pub mod sharing;

pub use error::{CdsError, Result};
