//! HTTP client for the wrapped model.
//!
//! Wire format: the request body is `{"instances": [[...], ...]}` and the
//! response is `{"predictions": [...]}` where each prediction is an array of
//! class probabilities or a single number.

use std::time::Duration;

use modelwatch_core::client::{ModelClient, ModelError};
use modelwatch_core::model::Record;
use reqwest::header::CONTENT_TYPE;
use reqwest::StatusCode;
use serde_json::{json, Value};
use thiserror::Error;
use tokio::runtime::Handle;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UpstreamError {
    #[error("upstream unavailable: {0}")]
    Unavailable(String),
    #[error("upstream timed out after {0:?}")]
    Timeout(Duration),
}

impl From<UpstreamError> for ModelError {
    fn from(e: UpstreamError) -> Self {
        match e {
            UpstreamError::Unavailable(m) => ModelError::Unavailable(m),
            UpstreamError::Timeout(_) => ModelError::Timeout(e.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Upstream {
    client: reqwest::Client,
    url: String,
    timeout: Duration,
}

impl Upstream {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .pool_max_idle_per_host(64)
            .build()
            .expect("static client configuration");
        Self {
            client,
            url: url.into(),
            timeout,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Send a raw JSON body and return the upstream status and body bytes.
    pub async fn forward(&self, body: Vec<u8>) -> Result<(StatusCode, Vec<u8>), UpstreamError> {
        let response = self
            .client
            .post(&self.url)
            .header(CONTENT_TYPE, "application/json")
            .body(body)
            .send()
            .await
            .map_err(|e| self.classify(e))?;
        let status = response.status();
        let bytes = response.bytes().await.map_err(|e| self.classify(e))?;
        Ok((status, bytes.to_vec()))
    }

    pub async fn predict(&self, instances: &[Record]) -> Result<Vec<Vec<f64>>, ModelError> {
        let body = json!({ "instances": instances.iter().map(Record::to_json).collect::<Vec<_>>() });
        let (status, bytes) = self.forward(body.to_string().into_bytes()).await?;
        if !status.is_success() {
            return Err(ModelError::Unavailable(format!("upstream returned {status}")));
        }
        let outputs = parse_predictions(&bytes).map_err(ModelError::Malformed)?;
        if outputs.len() != instances.len() {
            return Err(ModelError::Malformed(format!(
                "{} predictions for {} instances",
                outputs.len(),
                instances.len()
            )));
        }
        Ok(outputs)
    }

    fn classify(&self, e: reqwest::Error) -> UpstreamError {
        if e.is_timeout() {
            UpstreamError::Timeout(self.timeout)
        } else {
            UpstreamError::Unavailable(e.to_string())
        }
    }
}

/// Output vectors from an upstream response body.
pub fn parse_predictions(body: &[u8]) -> Result<Vec<Vec<f64>>, String> {
    let v: Value = serde_json::from_slice(body).map_err(|e| format!("response is not JSON: {e}"))?;
    let preds = v
        .get("predictions")
        .and_then(Value::as_array)
        .ok_or("response lacks a `predictions` array")?;
    preds
        .iter()
        .map(|p| match p {
            Value::Number(n) => n.as_f64().map(|x| vec![x]).ok_or_else(|| "bad number".to_string()),
            Value::Array(xs) => xs
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| format!("non-numeric output {x}")))
                .collect(),
            other => Err(format!("unsupported prediction {other}")),
        })
        .collect()
}

/// Synchronous [`ModelClient`] over an async [`Upstream`]. Must be used from
/// a thread outside the async runtime, e.g. inside `spawn_blocking`.
#[derive(Debug, Clone)]
pub struct BlockingUpstream {
    upstream: Upstream,
    handle: Handle,
}

impl BlockingUpstream {
    pub fn new(upstream: Upstream, handle: Handle) -> Self {
        Self { upstream, handle }
    }
}

impl ModelClient for BlockingUpstream {
    fn predict(&self, instances: &[Record]) -> Result<Vec<Vec<f64>>, ModelError> {
        // Large perturbation sets go out in chunks to keep bodies modest.
        let mut out = Vec::with_capacity(instances.len());
        for chunk in instances.chunks(1_000) {
            out.extend(self.handle.block_on(self.upstream.predict(chunk))?);
        }
        Ok(out)
    }
}
