//! Monitoring sidecar for a deployed model.
//!
//! The gateway proxies predictions to the upstream model and logs each
//! request as an event; consumers on the broker compute statistics, outlier
//! verdicts, drift reports and performance alerts off the hot path.

pub mod cli;
pub mod config;
pub mod gateway;
pub mod ledger;
pub mod metrics;
pub mod pipeline;
pub mod service;
pub mod simulate;
pub mod upstream;

pub use config::Config;
pub use gateway::Server;
