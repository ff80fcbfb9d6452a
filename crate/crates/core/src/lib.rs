//! Online fair allocation with PACE (Pace According to Current Estimated utility).
//!
//! The crate is organized bottom-up:
//!
//! - [`market`]: agents, item universe, valuations, budgets.
//! - [`input_models`]: i.i.d., corrupted, Markov and periodic arrival processes.
//! - [`dual_averaging`]: composite dual averaging with a log-barrier regularizer.
//! - [`pace`]: the PACE auction dynamics and their dual-averaging equivalence check.
//! - [`eg_solver`]: the box-constrained Eisenberg-Gale dual used for benchmarks.
//! - [`metrics`]: regret, envy and convergence errors.
//! - [`harness`]: repeated-path experiments, aggregation and reporting.

pub mod dual_averaging;
pub mod eg_solver;
pub mod harness;
pub mod input_models;
pub mod market;
pub mod metrics;
pub mod pace;
pub mod rng;
