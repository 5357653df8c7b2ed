//! Round-based simulator for learning-aware dynamic device scheduling in
//! federated edge learning with streaming training data.
//!
//! A coordinator repeatedly filters devices by a per-round latency bound,
//! scores them by virtual energy queues and a data-importance metric,
//! schedules a fixed-size subset, trains a shared classifier on whatever
//! data has arrived so far, prunes devices whose realized channel is too
//! weak, and aggregates the surviving updates.
//!
//! Modules:
//! - [`config`]: constants, distributions, validation, config-file parsing
//! - [`physics`]: rate, time, and energy models
//! - [`data`]: corpus loading, partitioning, and streaming arrivals
//! - [`importance`]: the data-importance metric and its ablations
//! - [`scheduler`]: virtual queues, feasibility, selection, pruning
//! - [`learner`]: the shared classifier and federated aggregation
//! - [`sim`]: the round loop and per-round logs
//! - [`report`]: CSV/manifest artifacts and cross-run comparison
//! - [`rng`]: keyed deterministic substreams
//! - [`exec`]: sequential/parallel execution switch

pub mod config;
pub mod data;
pub mod exec;
pub mod importance;
pub mod learner;
pub mod physics;
pub mod report;
pub mod rng;
pub mod scheduler;
pub mod sim;

pub use config::{RunConfig, SystemConfig};
pub use exec::ExecMode;
pub use sim::{run, RoundLog, SchedulerKind, Simulation};
