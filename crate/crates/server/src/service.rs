//! Composition root shared by `serve`, `replay` and the tests.

use std::sync::Arc;

use modelwatch_core::client::ModelError;
use modelwatch_core::model::{load_reference_set, ReferenceError, ReferenceSet};
use modelwatch_eventing::Broker;
use thiserror::Error;
use tokio::net::TcpListener;

use crate::config::Config;
use crate::gateway::{AppState, Server};
use crate::pipeline::{needs_reference_outputs, Monitor, MonitorError};
use crate::upstream::Upstream;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("reference set {path}: {source}")]
    Reference {
        path: String,
        #[source]
        source: ReferenceError,
    },
    #[error("reference model outputs: {0}")]
    ReferenceOutputs(#[from] ModelError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub fn load_reference(config: &Config) -> Result<ReferenceSet, ServiceError> {
    load_reference_set(&config.reference.path, &config.schema).map_err(|source| ServiceError::Reference {
        path: config.reference.path.display().to_string(),
        source,
    })
}

/// Reference outputs fetched from the upstream when a detector needs them.
pub async fn reference_outputs(config: &Config, reference: &ReferenceSet) -> Result<Option<Vec<Vec<f64>>>, ServiceError> {
    if !needs_reference_outputs(config) {
        return Ok(None);
    }
    let Some(url) = &config.upstream.url else {
        return Err(ModelError::Unavailable("label drift and black-box reduction need an upstream url".into()).into());
    };
    let upstream = Upstream::new(url, std::time::Duration::from_millis(config.upstream.timeout_ms));
    let mut outputs = Vec::with_capacity(reference.len());
    for chunk in reference.records().chunks(1_000) {
        outputs.extend(upstream.predict(chunk).await?);
    }
    Ok(Some(outputs))
}

/// Load the reference set and register every consumer on `broker`.
pub async fn build_monitor(config: &Config, broker: Broker) -> Result<(Arc<ReferenceSet>, Monitor), ServiceError> {
    let reference = load_reference(config)?;
    let outputs = reference_outputs(config, &reference).await?;
    let monitor = Monitor::start(config, &reference, outputs, broker)?;
    Ok((Arc::new(reference), monitor))
}

/// Start the HTTP service. With `monitoring` off the gateway is a plain
/// proxy: no payload logging and no consumers.
pub async fn start(config: Config, listener: TcpListener, monitoring: bool) -> Result<Server, ServiceError> {
    let broker = Broker::new();
    let (reference, monitor) = if monitoring {
        let (r, m) = build_monitor(&config, broker.clone()).await?;
        (r, Some(Arc::clone(m.state())))
    } else {
        (Arc::new(load_reference(&config)?), None)
    };
    let state = AppState::new(config, reference, broker, monitor)?;
    Ok(Server::start(state, listener).await?)
}
