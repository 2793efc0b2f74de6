//! Hub-based platoon coordination: road networks, the waiting-time game,
//! equilibrium seeking, stochastic travel times, closed-loop simulation and
//! Monte Carlo experiments.

pub mod error;
pub mod experiment;
pub mod game;
pub mod network;
pub mod oracle;
pub mod sim;
pub mod solver;
pub mod stochastic;

pub use error::{Error, Result};
