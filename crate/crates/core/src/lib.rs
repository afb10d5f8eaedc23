//! Variational walkback: stochastic transition operators trained to revert
//! heated trajectories, with exact finite-state oracles and diagnostics.

pub mod cli;
pub mod data;
pub mod diffnet;
pub mod error;
pub mod estimators;
pub mod io;
pub mod operators;
pub mod oracle;
pub mod schedule;
pub mod training;

pub use error::{Result, WalkbackError};
