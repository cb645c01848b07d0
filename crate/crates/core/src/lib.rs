//! Highway-merge traffic microsimulator with counterfactual policy
//! evaluation (CPE) for gating a policy under test (PUT).
//!
//! The ego's policy is only executed when forked worlds, in which one nearby
//! vehicle at a time switches to an independent constant-acceleration
//! behavior, show a collision probability at or below `rho_max`. Otherwise
//! the ego falls back to IDM lane following.

pub mod checks;
pub mod cli;
pub mod config;
pub mod cpe;
pub mod drivers;
pub mod dynamics;
pub mod error;
pub mod map;
pub mod put;
pub mod report;
pub mod runner;
pub mod simulate;
pub mod world;

#[cfg(test)]
pub(crate) mod test_support;

pub use cpe::{cpe_gate, evaluate, CpeEvaluation, CpeReport, GateSettings, KSelection, PolicyPool};
pub use error::{CpeError, Result};
pub use put::PutPolicy;
pub use world::{fork_world, VehicleId, VehicleState, WorldState};
