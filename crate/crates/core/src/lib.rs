//! Monitoring primitives for deployed models: schemas and records, streaming
//! summaries, performance tracking, drift and outlier detection, and anchor
//! explanations.

pub mod client;
pub mod drift;
pub mod explain;
pub mod model;
pub mod outlier;
pub mod performance;
pub mod stream;
