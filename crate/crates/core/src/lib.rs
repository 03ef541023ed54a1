//! Orchestration engine for hyperparameter optimization on a shared GPU cluster.

pub mod ids;
pub mod simcluster;
pub mod space;
pub mod tuners;
pub mod events;
pub mod orchestrator;
pub mod master;
pub mod store;
pub mod engine;
pub mod api;
