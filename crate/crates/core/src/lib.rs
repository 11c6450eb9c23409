pub mod attribution;
pub mod baseline;
pub mod boundary;
pub mod config;
pub mod counters;
pub mod fixtures;
pub mod host;
pub mod metrics;
pub mod provenance;
pub mod sampler;
pub mod session;
pub mod stochastic;
pub mod store;
pub mod workflow;
