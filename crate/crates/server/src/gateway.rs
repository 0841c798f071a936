//! HTTP surface: prediction proxy, feedback, read-only monitoring views,
//! on-demand explanations, health and metrics.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use modelwatch_core::client::ModelError;
use modelwatch_core::drift::DriftKind;
use modelwatch_core::explain::{anchor_search, predicted_class, ExplainError};
use modelwatch_core::model::{
    validate_json, FeedbackEvent, PredictionEvent, Record, ReferenceSet, Target, TimestampMs,
};
use modelwatch_core::performance::PerformanceState;
use modelwatch_eventing::{Broker, BrokerError, DrainStats, Event};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::oneshot;

use crate::config::{Config, Task};
use crate::ledger::RequestLedger;
use crate::metrics::Metrics;
use crate::pipeline::{kind, topic, MonitorState};
use crate::upstream::{parse_predictions, BlockingUpstream, Upstream, UpstreamError};

pub const REQUEST_ID_HEADER: &str = "x-request-id";

pub fn now_ms() -> TimestampMs {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

enum LogMsg {
    Event(Box<Event>),
    Stop,
}

/// Hands events to the broker from a dedicated thread so that publishing
/// happens after, and independently of, the HTTP response.
pub struct PayloadLogger {
    tx: Mutex<mpsc::Sender<LogMsg>>,
    pending: Arc<AtomicU64>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl PayloadLogger {
    pub fn spawn(broker: Broker) -> std::io::Result<Self> {
        let (tx, rx) = mpsc::channel::<LogMsg>();
        let pending = Arc::new(AtomicU64::new(0));
        let p = Arc::clone(&pending);
        let worker = std::thread::Builder::new()
            .name("payload-logger".into())
            .spawn(move || {
                while let Ok(LogMsg::Event(e)) = rx.recv() {
                    if let Err(err) = broker.publish(*e) {
                        tracing::warn!(error = %err, "payload event not published");
                    }
                    p.fetch_sub(1, Ordering::SeqCst);
                }
            })?;
        Ok(Self {
            tx: Mutex::new(tx),
            pending,
            worker: Mutex::new(Some(worker)),
        })
    }

    pub fn log(&self, event: Event) {
        self.pending.fetch_add(1, Ordering::SeqCst);
        if self.tx.lock().unwrap().send(LogMsg::Event(Box::new(event))).is_err() {
            self.pending.fetch_sub(1, Ordering::SeqCst);
        }
    }

    pub fn pending(&self) -> u64 {
        self.pending.load(Ordering::SeqCst)
    }

    /// Publish everything already logged, then stop the worker.
    pub fn close(&self) {
        let _ = self.tx.lock().unwrap().send(LogMsg::Stop);
        if let Some(w) = self.worker.lock().unwrap().take() {
            let _ = w.join();
        }
    }
}

pub struct AppState {
    config: Config,
    reference: Arc<ReferenceSet>,
    upstream: Option<Upstream>,
    explainer: Option<Upstream>,
    ledger: RequestLedger,
    metrics: Metrics,
    logger: Option<PayloadLogger>,
    broker: Broker,
    monitor: Option<Arc<MonitorState>>,
}

impl AppState {
    /// `monitor` absent turns the gateway into a plain proxy with no
    /// payload logging.
    pub fn new(
        config: Config,
        reference: Arc<ReferenceSet>,
        broker: Broker,
        monitor: Option<Arc<MonitorState>>,
    ) -> std::io::Result<Self> {
        let upstream = config
            .upstream
            .url
            .as_ref()
            .map(|u| Upstream::new(u, Duration::from_millis(config.upstream.timeout_ms)));
        let explainer = config
            .explainer
            .upstream_url
            .as_ref()
            .or(config.upstream.url.as_ref())
            .map(|u| Upstream::new(u, Duration::from_millis(config.explainer.timeout_ms)));
        let logger = match monitor {
            Some(_) => Some(PayloadLogger::spawn(broker.clone())?),
            None => None,
        };
        Ok(Self {
            ledger: RequestLedger::new(config.performance.ledger_capacity),
            config,
            reference,
            upstream,
            explainer,
            metrics: Metrics::default(),
            logger,
            broker,
            monitor,
        })
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn ledger(&self) -> &RequestLedger {
        &self.ledger
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn monitor(&self) -> Option<&Arc<MonitorState>> {
        self.monitor.as_ref()
    }

    fn log(&self, event: Event) {
        if let Some(l) = &self.logger {
            l.log(event);
        }
    }

    /// Wait for logged payloads to reach the broker, then for every
    /// consumer to go idle.
    pub fn settle(&self, timeout: Duration) -> Result<DrainStats, BrokerError> {
        let deadline = Instant::now() + timeout;
        if let Some(l) = &self.logger {
            while l.pending() > 0 && Instant::now() < deadline {
                std::thread::sleep(Duration::from_millis(1));
            }
        }
        self.broker.drain(deadline.saturating_duration_since(Instant::now()))
    }

    fn close_logger(&self) {
        if let Some(l) = &self.logger {
            l.close();
        }
    }
}

type Shared = Arc<AppState>;

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn detailed(status: StatusCode, message: &str, details: Value) -> Response {
    (status, Json(json!({ "error": message, "details": details }))).into_response()
}

fn counted(state: &AppState, endpoint: &str, response: Response) -> Response {
    state.metrics.request(endpoint, response.status().as_u16());
    response
}

fn parse_instances(state: &AppState, body: &[u8]) -> Result<Vec<Record>, Response> {
    let v: Value = serde_json::from_slice(body)
        .map_err(|e| error(StatusCode::BAD_REQUEST, format!("body is not valid JSON: {e}")))?;
    let instances = v
        .get("instances")
        .and_then(Value::as_array)
        .filter(|a| !a.is_empty())
        .ok_or_else(|| error(StatusCode::BAD_REQUEST, "body needs a non-empty `instances` array"))?;
    let mut records = Vec::with_capacity(instances.len());
    let mut failures = Vec::new();
    for (i, inst) in instances.iter().enumerate() {
        match validate_json(inst, &state.config.schema) {
            Ok(r) => records.push(r),
            Err(e) => failures.push(json!({ "instance": i, "error": e.to_string() })),
        }
    }
    if failures.is_empty() {
        Ok(records)
    } else {
        Err(detailed(StatusCode::BAD_REQUEST, "schema validation failed", Value::Array(failures)))
    }
}

fn upstream_failure(state: &AppState, e: &UpstreamError) -> Response {
    match e {
        UpstreamError::Unavailable(m) => {
            state.metrics.upstream_error("unavailable");
            error(StatusCode::BAD_GATEWAY, format!("upstream unavailable: {m}"))
        }
        UpstreamError::Timeout(_) => {
            state.metrics.upstream_error("timeout");
            error(StatusCode::GATEWAY_TIMEOUT, e.to_string())
        }
    }
}

async fn predict(State(state): State<Shared>, body: Bytes) -> Response {
    let started = Instant::now();
    let response = predict_inner(&state, body).await;
    state.metrics.observe_latency(started.elapsed());
    counted(&state, "predict", response)
}

async fn predict_inner(state: &AppState, body: Bytes) -> Response {
    let records = match parse_instances(state, &body) {
        Ok(r) => r,
        Err(resp) => {
            state.metrics.validation_failure();
            return resp;
        }
    };
    let Some(upstream) = &state.upstream else {
        state.metrics.upstream_error("unavailable");
        return error(StatusCode::BAD_GATEWAY, "no upstream configured");
    };
    let (status, bytes) = match upstream.forward(body.to_vec()).await {
        Ok(r) => r,
        Err(e) => return upstream_failure(state, &e),
    };
    let status = StatusCode::from_u16(status.as_u16()).unwrap_or(StatusCode::BAD_GATEWAY);
    if !status.is_success() {
        state.metrics.upstream_error("status");
        return (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response();
    }
    let outputs = match parse_predictions(&bytes) {
        Ok(o) if o.len() == records.len() => o,
        Ok(o) => {
            state.metrics.upstream_error("malformed");
            return error(
                StatusCode::BAD_GATEWAY,
                format!("upstream returned {} predictions for {} instances", o.len(), records.len()),
            );
        }
        Err(m) => {
            state.metrics.upstream_error("malformed");
            return error(StatusCode::BAD_GATEWAY, format!("malformed upstream response: {m}"));
        }
    };

    let request_id = uuid::Uuid::new_v4().to_string();
    if state.logger.is_some() {
        let ts = now_ms();
        let single = records.len() == 1;
        for (i, (record, output)) in records.into_iter().zip(outputs).enumerate() {
            let id = if single { request_id.clone() } else { format!("{request_id}:{i}") };
            let predicted_label = match state.config.model.task {
                Task::Classification => predicted_class(&output),
                Task::Regression => None,
            };
            let event = PredictionEvent {
                request_id: id,
                timestamp: ts,
                record,
                model_output: output,
                predicted_label,
            };
            state.ledger.insert(event.clone());
            match serde_json::to_value(&event) {
                Ok(payload) => state.log(Event::new(topic::PREDICTIONS, kind::PREDICTION, payload, ts)),
                Err(e) => tracing::warn!(error = %e, "prediction event not serialisable"),
            }
        }
    }
    let mut response = (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response();
    if let Ok(v) = HeaderValue::from_str(&request_id) {
        response.headers_mut().insert(REQUEST_ID_HEADER, v);
    }
    response
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeedbackBody {
    request_id: Option<String>,
    instance: Option<Value>,
    predicted: Option<Target>,
    truth: Target,
}

async fn feedback(State(state): State<Shared>, body: Bytes) -> Response {
    let response = feedback_inner(&state, &body);
    counted(&state, "feedback", response)
}

fn feedback_inner(state: &AppState, body: &[u8]) -> Response {
    let fb: FeedbackBody = match serde_json::from_slice(body) {
        Ok(f) => f,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid feedback body: {e}")),
    };
    let logged = fb.request_id.as_deref().and_then(|id| state.ledger.get(id));
    let (predicted, record) = match (logged, fb.predicted) {
        (Some(p), _) => match p.predicted_target() {
            Some(t) => (t, Some(p.record)),
            None => return error(StatusCode::BAD_REQUEST, "logged prediction has no usable output"),
        },
        (None, Some(predicted)) => {
            let record = match &fb.instance {
                Some(v) => match validate_json(v, &state.config.schema) {
                    Ok(r) => Some(r),
                    Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
                },
                None => None,
            };
            (predicted, record)
        }
        (None, None) => {
            return match &fb.request_id {
                Some(id) => error(StatusCode::NOT_FOUND, format!("unknown request id `{id}`")),
                None => error(StatusCode::BAD_REQUEST, "feedback needs a request_id or an inline prediction"),
            }
        }
    };
    // Reject targets the performance consumer would refuse.
    let mut scratch = match state.config.model.task {
        Task::Classification => PerformanceState::classification(state.config.model.classes),
        Task::Regression => PerformanceState::regression(),
    };
    if let Err(e) = scratch.ingest(predicted, fb.truth) {
        return error(StatusCode::BAD_REQUEST, e.to_string());
    }
    let ts = now_ms();
    let event = FeedbackEvent {
        request_id: fb.request_id.clone(),
        record,
        predicted,
        truth: fb.truth,
        timestamp: ts,
    };
    match serde_json::to_value(&event) {
        Ok(payload) => state.log(Event::new(topic::FEEDBACK, kind::FEEDBACK, payload, ts)),
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
    (StatusCode::ACCEPTED, Json(json!({ "accepted": true, "request_id": fb.request_id }))).into_response()
}

fn monitor_or_503(state: &AppState) -> Result<&MonitorState, Response> {
    state
        .monitor
        .as_deref()
        .ok_or_else(|| error(StatusCode::SERVICE_UNAVAILABLE, "monitoring is disabled"))
}

#[derive(Debug, Deserialize)]
struct StatsQuery {
    feature: Option<String>,
    window: Option<String>,
}

async fn stats(State(state): State<Shared>, Query(q): Query<StatsQuery>) -> Response {
    let response = (|| {
        let m = monitor_or_503(&state)?;
        if let Some(f) = &q.feature {
            if !m.has_feature(f) {
                return Err(error(StatusCode::NOT_FOUND, format!("unknown feature `{f}`")));
            }
        }
        let snap = m.stats_snapshot(q.feature.as_deref());
        let body = match q.window.as_deref() {
            None => snap,
            Some(w @ ("lifetime" | "window" | "last_completed_window")) => json!({ w: snap[w] }),
            Some(other) => {
                return Err(error(
                    StatusCode::BAD_REQUEST,
                    format!("window must be lifetime, window or last_completed_window, got `{other}`"),
                ))
            }
        };
        Ok(Json(body).into_response())
    })()
    .unwrap_or_else(|r| r);
    counted(&state, "stats", response)
}

async fn performance(State(state): State<Shared>) -> Response {
    let response = match monitor_or_503(&state) {
        Ok(m) => Json(m.performance_report()).into_response(),
        Err(r) => r,
    };
    counted(&state, "performance", response)
}

#[derive(Debug, Deserialize)]
struct DriftQuery {
    kind: Option<DriftKind>,
}

async fn drift(State(state): State<Shared>, Query(q): Query<DriftQuery>) -> Response {
    let response = match monitor_or_503(&state) {
        Ok(m) => match m.latest_drift(q.kind.unwrap_or(DriftKind::Covariate)) {
            Some(report) => Json(report).into_response(),
            None => StatusCode::NO_CONTENT.into_response(),
        },
        Err(r) => r,
    };
    counted(&state, "drift", response)
}

#[derive(Debug, Deserialize)]
struct OutlierQuery {
    limit: Option<usize>,
}

async fn outliers(State(state): State<Shared>, Query(q): Query<OutlierQuery>) -> Response {
    let response = match monitor_or_503(&state) {
        Ok(m) => Json(m.outliers(q.limit.unwrap_or(10))).into_response(),
        Err(r) => r,
    };
    counted(&state, "outliers", response)
}

async fn explain(State(state): State<Shared>, body: Bytes) -> Response {
    let response = explain_inner(Arc::clone(&state), body).await;
    counted(&state, "explain", response)
}

async fn explain_inner(state: Shared, body: Bytes) -> Response {
    let v: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("body is not valid JSON: {e}")),
    };
    let Some(inst) = v.get("instance") else {
        return error(StatusCode::BAD_REQUEST, "body needs an `instance` array");
    };
    let record = match validate_json(inst, &state.config.schema) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let Some(upstream) = state.explainer.clone() else {
        return error(StatusCode::BAD_GATEWAY, "no upstream configured for explanations");
    };
    let client = BlockingUpstream::new(upstream, tokio::runtime::Handle::current());
    let reference = Arc::clone(&state.reference);
    let config = state.config.explainer.search_config();
    let result =
        tokio::task::spawn_blocking(move || anchor_search(&record, &client, &reference, &config)).await;
    match result {
        Ok(Ok(explanation)) => Json(explanation).into_response(),
        Ok(Err(ExplainError::BudgetExhausted(partial))) => (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(json!({ "error": "query budget exhausted before reaching the precision target", "partial": true, "explanation": partial })),
        )
            .into_response(),
        Ok(Err(ExplainError::Model(ModelError::Timeout(m)))) => {
            state.metrics.upstream_error("timeout");
            error(StatusCode::GATEWAY_TIMEOUT, m)
        }
        Ok(Err(ExplainError::Model(e))) => {
            state.metrics.upstream_error(match e {
                ModelError::Malformed(_) => "malformed",
                _ => "unavailable",
            });
            error(StatusCode::BAD_GATEWAY, e.to_string())
        }
        Ok(Err(e @ ExplainError::BudgetTooSmall { .. })) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("explainer task failed: {e}")),
    }
}

async fn healthz(State(state): State<Shared>) -> Response {
    let response = Json(json!({ "status": "ok", "broker_running": state.broker.is_running() })).into_response();
    counted(&state, "healthz", response)
}

async fn metrics(State(state): State<Shared>) -> Response {
    state.metrics.request("metrics", 200);
    let text = state.metrics.render(&state.broker, state.monitor.as_deref());
    ([(header::CONTENT_TYPE, "text/plain; version=0.0.4")], text).into_response()
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/v1/predict", post(predict))
        .route("/v1/feedback", post(feedback))
        .route("/v1/stats", get(stats))
        .route("/v1/performance", get(performance))
        .route("/v1/drift", get(drift))
        .route("/v1/outliers/latest", get(outliers))
        .route("/v1/explain", post(explain))
        .route("/healthz", get(healthz))
        .route("/metrics", get(metrics))
        .with_state(state)
}

/// A running HTTP server bound to a local address.
pub struct Server {
    addr: SocketAddr,
    state: Shared,
    stop: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl Server {
    pub async fn start(state: AppState, listener: TcpListener) -> std::io::Result<Self> {
        let addr = listener.local_addr()?;
        let state = Arc::new(state);
        let (stop, stopped) = oneshot::channel::<()>();
        let app = router(Arc::clone(&state));
        let task = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = stopped.await;
                })
                .await
        });
        Ok(Self {
            addr,
            state,
            stop: Some(stop),
            task,
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn state(&self) -> &Shared {
        &self.state
    }

    /// See [`AppState::settle`].
    pub async fn settle(&self, timeout: Duration) -> Result<DrainStats, BrokerError> {
        let state = Arc::clone(&self.state);
        tokio::task::spawn_blocking(move || state.settle(timeout))
            .await
            .expect("settle task panicked")
    }

    /// Stop accepting requests, publish outstanding payloads and drain the
    /// broker.
    pub async fn shutdown(mut self, timeout: Duration) -> Result<DrainStats, BrokerError> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Err(e) = (&mut self.task).await.expect("server task panicked") {
            tracing::warn!(error = %e, "http server stopped with an error");
        }
        let state = Arc::clone(&self.state);
        tokio::task::spawn_blocking(move || {
            state.close_logger();
            state.broker.shutdown(timeout)
        })
        .await
        .expect("shutdown task panicked")
    }
}
