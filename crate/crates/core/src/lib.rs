//! Discovering temporally extended options from demonstrations in gridworlds.
//!
//! [`ddo`] fits a hierarchical policy (options with termination conditions) to
//! expert trajectories by gradient ascent on the exact marginal likelihood;
//! [`smdp`] learns a meta-policy over the discovered options; [`metrics`]
//! scores the result; [`pipeline`] wires the stages together with
//! deterministic seeding and on-disk artifacts.

pub mod ddo;
pub mod expert;
pub mod gridworld;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod smdp;
