//! Federated learning simulator with Shapley-value based defenses against
//! Byzantine clients.
//!
//! Each round, clients train a shared model on private non-IID shards and
//! the server aggregates their updates. The FedSV defense values each update
//! by its Shapley value on a server-side validation set, smooths the values
//! across rounds and keeps only the high-value cluster of clients. Baseline
//! robust aggregators (coordinate median, trimmed mean, Multi-Krum) and
//! several attacks are provided for comparison.

pub mod aggregation;
pub mod attacks;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod params;
pub mod seed;
pub mod selection;
pub mod shapley;

pub use error::{Error, Result};
pub use params::ParamVector;
