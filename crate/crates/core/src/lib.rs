//! Allocation engine for a hedging overlay driven by a deep policy network.

pub mod agent;
pub mod baselines;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod plot;
pub mod policy;
pub mod rewards;
pub mod scenarios;
pub mod simulator;
pub mod trainer;

pub use error::{Error, Result};
