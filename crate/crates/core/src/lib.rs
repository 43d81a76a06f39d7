//! Synchronous federated learning simulator for a toy report-generation task.
//!
//! Clients train a position-wise captioner locally, exchange parameter blobs
//! through a shared directory, and the server aggregates them with FedAvg,
//! Krum or loss-aware weighted averaging (L-FedAvg).

pub mod aggregation;
pub mod client;
pub mod coordination;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod param;
pub mod seed;
