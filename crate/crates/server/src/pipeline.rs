//! Asynchronous monitoring consumers wired onto the broker.
//!
//! ```text
//! predictions ─┬─> stats
//!              ├─> outlier ──> outlier-verdict ──> drift ──> drift-report, alert
//!              └─> (drift, when outliers are not excluded)
//! feedback ────────> performance ──> alert
//! ```

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use modelwatch_core::drift::{DriftConfig, DriftDetector, DriftKind, DriftMethod, DriftReport, PreprocessorKind, Sample};
use modelwatch_core::model::{FeedbackEvent, PredictionEvent, Record, ReferenceSet, TimestampMs};
use modelwatch_core::outlier::{calibrate_threshold, numerical_vector, KnnDetector, MahalanobisState, OutlierVerdict};
use modelwatch_core::performance::{Alert, MetricSnapshot, PerformanceState, PerformanceTracker};
use modelwatch_core::stream::{RecordSketch, SketchSnapshot, WindowedSketch};
use modelwatch_eventing::{chain_sink, Broker, BrokerError, Event, Filter, HandlerError};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{Config, OutlierKind, Task};

pub mod topic {
    pub const PREDICTIONS: &str = "predictions";
    pub const FEEDBACK: &str = "feedback";
    pub const MONITORING: &str = "monitoring";
}

pub mod kind {
    pub const PREDICTION: &str = "prediction";
    pub const FEEDBACK: &str = "feedback";
    pub const OUTLIER_VERDICT: &str = "outlier-verdict";
    pub const DRIFT_REPORT: &str = "drift-report";
    pub const ALERT: &str = "alert";
}

const RECENT_OUTLIERS: usize = 100;

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("drift detector: {0}")]
    Drift(#[from] modelwatch_core::drift::DriftError),
    #[error("outlier detector: {0}")]
    Outlier(#[from] modelwatch_core::outlier::OutlierError),
    #[error("label drift needs reference model outputs")]
    MissingReferenceOutputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictPayload {
    pub prediction: PredictionEvent,
    /// Absent when the detector could not score the instance.
    pub verdict: Option<OutlierVerdict>,
}

#[derive(Debug, Clone)]
struct Sketches {
    inputs: RecordSketch,
    outputs: RecordSketch,
    output_dim: usize,
}

impl Sketches {
    fn observe(&mut self, event: &PredictionEvent) {
        // Records were validated at ingress; the outputs may have any shape.
        let _ = self.inputs.observe(&event.record);
        if event.model_output.len() == self.output_dim {
            self.outputs.observe_vector(&event.model_output);
        }
    }

    fn snapshot(&self, feature: Option<&str>) -> Value {
        let pick = |m: std::collections::BTreeMap<String, SketchSnapshot>| -> Value {
            match feature {
                Some(f) => m.get(f).map_or(json!({}), |s| json!({ f: s })),
                None => json!(m),
            }
        };
        json!({ "inputs": pick(self.inputs.snapshot()), "outputs": pick(self.outputs.snapshot()) })
    }
}

struct StatsState {
    lifetime: Sketches,
    windowed: WindowedSketch<Sketches>,
}

#[derive(Default)]
struct OutlierLog {
    latest: Option<OutlierVerdict>,
    flagged: VecDeque<OutlierVerdict>,
}

#[derive(Default)]
struct LatestDrift {
    covariate: Option<DriftReport>,
    label: Option<DriftReport>,
}

#[derive(Debug, Default)]
pub struct Counters {
    pub predictions: AtomicU64,
    pub feedback: AtomicU64,
    pub outliers_scored: AtomicU64,
    pub outliers_flagged: AtomicU64,
    pub drift_reports: AtomicU64,
    pub drift_alerts: AtomicU64,
    pub performance_alerts: AtomicU64,
    pub consumer_errors: AtomicU64,
}

impl Counters {
    pub fn get(c: &AtomicU64) -> u64 {
        c.load(Ordering::SeqCst)
    }
}

/// Shared, read-mostly monitoring state. Each field has a single writer
/// (its consumer); HTTP handlers only read.
pub struct MonitorState {
    stats: RwLock<StatsState>,
    performance: RwLock<PerformanceTracker>,
    drift: RwLock<LatestDrift>,
    outliers: RwLock<OutlierLog>,
    feature_names: Vec<String>,
    output_names: Vec<String>,
    pub counters: Counters,
}

impl MonitorState {
    pub fn has_feature(&self, name: &str) -> bool {
        self.feature_names.iter().any(|n| n == name) || self.output_names.iter().any(|n| n == name)
    }

    /// Lifetime, current-window and last-completed-window summaries.
    pub fn stats_snapshot(&self, feature: Option<&str>) -> Value {
        let s = self.stats.read().unwrap();
        json!({
            "lifetime": {
                "count": s.lifetime.inputs.snapshot().values().next().map_or(0, |f| f.count),
                "features": s.lifetime.snapshot(feature),
            },
            "window": {
                "scope": s.windowed.scope(),
                "sequence": s.windowed.sequence(),
                "count": s.windowed.in_window(),
                "features": s.windowed.current().snapshot(feature),
            },
            "last_completed_window": s.windowed.last_completed().map(|w| w.snapshot(feature)),
        })
    }

    pub fn stats_window(&self) -> u64 {
        self.stats.read().unwrap().windowed.sequence()
    }

    pub fn performance_window(&self) -> u64 {
        self.performance.read().unwrap().window()
    }

    pub fn performance_report(&self) -> Value {
        let p = self.performance.read().unwrap();
        let snap = |s: &PerformanceState, w: u64| -> Option<MetricSnapshot> { p.snapshot(s, w).ok() };
        json!({
            "lifetime": snap(p.lifetime(), 0),
            "window": snap(p.current(), p.window()),
            "last_completed_window": p.last_completed().and_then(|s| snap(s, p.window().saturating_sub(1))),
        })
    }

    pub fn latest_drift(&self, kind: DriftKind) -> Option<DriftReport> {
        let d = self.drift.read().unwrap();
        match kind {
            DriftKind::Covariate => d.covariate.clone(),
            DriftKind::Label => d.label.clone(),
        }
    }

    pub fn outliers(&self, limit: usize) -> Value {
        let o = self.outliers.read().unwrap();
        json!({
            "latest": o.latest,
            "outliers": o.flagged.iter().rev().take(limit).collect::<Vec<_>>(),
            "scored": Counters::get(&self.counters.outliers_scored),
            "flagged": Counters::get(&self.counters.outliers_flagged),
        })
    }
}

/// Broker plus the consumers registered on it.
pub struct Monitor {
    broker: Broker,
    state: Arc<MonitorState>,
}

fn publish_alert(broker: &Broker, alert: &Alert) -> Result<(), HandlerError> {
    broker.publish(Event::new(topic::MONITORING, kind::ALERT, serde_json::to_value(alert)?, alert.timestamp))?;
    Ok(())
}

enum OutlierModel {
    Mahalanobis { state: MahalanobisState, threshold: f64 },
    Knn { detector: KnnDetector, threshold: f64 },
}

impl OutlierModel {
    fn build(config: &Config, reference: &ReferenceSet) -> Result<Option<Self>, MonitorError> {
        let q = config.outlier.percentile;
        match config.outlier.detector {
            OutlierKind::None => Ok(None),
            OutlierKind::Mahalanobis => {
                let dim = reference.schema().numerical_indices().len();
                if dim == 0 {
                    tracing::warn!("no numerical features; Mahalanobis detector disabled");
                    return Ok(None);
                }
                let points: Vec<Vec<f64>> = reference.records().iter().map(numerical_vector).collect();
                let mut state = MahalanobisState::new(dim, config.outlier.epsilon);
                for p in &points {
                    state.update(p)?;
                }
                let threshold = calibrate_threshold(&state.reference_scores(&points)?, q)?;
                Ok(Some(OutlierModel::Mahalanobis { state, threshold }))
            }
            OutlierKind::Knn => {
                let detector = KnnDetector::fit(reference, config.outlier.k)?;
                let threshold = calibrate_threshold(&detector.reference_scores(), q)?;
                Ok(Some(OutlierModel::Knn { detector, threshold }))
            }
        }
    }

    fn score(&mut self, event: &PredictionEvent) -> Option<OutlierVerdict> {
        match self {
            OutlierModel::Mahalanobis { state, threshold } => {
                let x = numerical_vector(&event.record);
                let score = state
                    .score(&x)
                    .map_err(|e| tracing::warn!(error = %e, "mahalanobis scoring failed"))
                    .ok()?;
                let verdict = OutlierVerdict::new(&event.request_id, "mahalanobis", score, *threshold);
                // The online state tracks inliers only.
                if !verdict.is_outlier {
                    let _ = state.update(&x);
                }
                Some(verdict)
            }
            OutlierModel::Knn { detector, threshold } => {
                let score = detector
                    .score(&event.record)
                    .map_err(|e| tracing::warn!(error = %e, "knn scoring failed"))
                    .ok()?;
                Some(OutlierVerdict::new(&event.request_id, "knn", score, *threshold))
            }
        }
    }
}

struct DriftStage {
    covariate: DriftDetector,
    covariate_on_outputs: bool,
    label: Option<DriftDetector>,
    batch_size: usize,
    output_dim: Option<usize>,
    exclude_outliers: bool,
    records: Vec<Record>,
    outputs: Vec<Vec<f64>>,
    last_timestamp: TimestampMs,
    batch: u64,
}

impl DriftStage {
    fn push(&mut self, event: PredictionEvent) {
        self.last_timestamp = event.timestamp;
        self.records.push(event.record);
        self.outputs.push(event.model_output);
    }

    fn run(&mut self, broker: &Broker, state: &MonitorState) -> Result<(), HandlerError> {
        let window = self.batch;
        self.batch += 1;
        let records = std::mem::take(&mut self.records);
        let outputs = std::mem::take(&mut self.outputs);
        let outputs_usable = self
            .output_dim
            .is_some_and(|k| outputs.iter().all(|o| o.len() == k));
        let mut reports = Vec::new();
        if self.covariate_on_outputs && !outputs_usable {
            tracing::warn!(window, "covariate batch skipped: outputs do not match the reference output space");
        } else {
            let sample = if self.covariate_on_outputs {
                Sample::Outputs(&outputs)
            } else {
                Sample::Records(&records)
            };
            reports.push(self.covariate.detect(sample, window, self.last_timestamp)?);
        }
        if let Some(label) = &self.label {
            if outputs_usable {
                reports.push(label.detect(Sample::Outputs(&outputs), window, self.last_timestamp)?);
            } else {
                tracing::warn!(window, "label batch skipped: outputs do not match the reference output space");
            }
        }
        for r in reports {
            state.counters.drift_reports.fetch_add(1, Ordering::SeqCst);
            {
                let mut latest = state.drift.write().unwrap();
                match r.kind {
                    DriftKind::Covariate => latest.covariate = Some(r.clone()),
                    DriftKind::Label => latest.label = Some(r.clone()),
                }
            }
            broker.publish(Event::new(topic::MONITORING, kind::DRIFT_REPORT, serde_json::to_value(&r)?, r.timestamp))?;
            if r.drift_detected {
                state.counters.drift_alerts.fetch_add(1, Ordering::SeqCst);
                publish_alert(broker, &drift_alert(&r))?;
            }
        }
        Ok(())
    }
}

/// Alert raised by a drift report: the smallest p-value against alpha.
pub fn drift_alert(report: &DriftReport) -> Alert {
    let p = match &report.mmd {
        Some(m) => m.p_value,
        None => report.features.iter().map(|f| f.p_value).fold(1.0, f64::min),
    };
    let rule = match report.kind {
        DriftKind::Covariate => "covariate-drift",
        DriftKind::Label => "label-drift",
    };
    Alert {
        rule: rule.into(),
        metric: "p_value".into(),
        value: p,
        threshold: report.alpha,
        window: report.window,
        timestamp: report.timestamp,
    }
}

fn build_drift(
    config: &Config,
    reference: &ReferenceSet,
    reference_outputs: Option<&[Vec<f64>]>,
) -> Result<DriftStage, MonitorError> {
    let drift: &DriftConfig = &config.drift;
    let covariate_on_outputs = drift.preprocessor == PreprocessorKind::Bbsd;
    let covariate = if covariate_on_outputs {
        let outputs = reference_outputs.ok_or(MonitorError::MissingReferenceOutputs)?;
        let with_outputs = reference
            .clone()
            .with_model_outputs(outputs.to_vec())
            .map_err(|e| modelwatch_core::drift::DriftError::Preprocessor(e.to_string()))?;
        DriftDetector::covariate(&with_outputs, drift.clone(), None)?
    } else {
        DriftDetector::covariate(reference, drift.clone(), None)?
    };
    let label = match &config.label_drift {
        Some(cfg) => {
            let outputs = reference_outputs.ok_or(MonitorError::MissingReferenceOutputs)?;
            Some(DriftDetector::label(reference, outputs.to_vec(), cfg.clone())?)
        }
        None => None,
    };
    let batch_size = drift
        .min_batch
        .max(config.label_drift.as_ref().map_or(0, |d| d.min_batch));
    Ok(DriftStage {
        covariate,
        covariate_on_outputs,
        label,
        batch_size,
        output_dim: reference_outputs.and_then(|o| o.first()).map(Vec::len),
        exclude_outliers: config.outlier.exclude_from_drift,
        records: Vec::with_capacity(batch_size),
        outputs: Vec::with_capacity(batch_size),
        last_timestamp: 0,
        batch: 0,
    })
}

fn output_names(config: &Config) -> Vec<String> {
    match config.model.task {
        Task::Classification => (0..config.model.classes).map(|i| format!("output_{i}")).collect(),
        Task::Regression => vec!["output_0".into()],
    }
}

impl Monitor {
    /// Build every consumer and register it on `broker`. Reference model
    /// outputs are required when label drift or black-box reduction is
    /// configured.
    pub fn start(
        config: &Config,
        reference: &ReferenceSet,
        reference_outputs: Option<Vec<Vec<f64>>>,
        broker: Broker,
    ) -> Result<Self, MonitorError> {
        let capacity = config.eventing.queue_capacity;
        let out_names = output_names(config);
        let sketches = Sketches {
            inputs: RecordSketch::new(reference.schema(), config.stats.bins),
            outputs: RecordSketch::numerical(out_names.clone(), config.stats.bins),
            output_dim: out_names.len(),
        };
        let empty_perf = match config.model.task {
            Task::Classification => PerformanceState::classification(config.model.classes),
            Task::Regression => PerformanceState::regression(),
        };
        let state = Arc::new(MonitorState {
            stats: RwLock::new(StatsState {
                lifetime: sketches.clone(),
                windowed: WindowedSketch::new(config.stats.window, sketches),
            }),
            performance: RwLock::new(PerformanceTracker::new(
                empty_perf,
                config.performance.window,
                config.performance.rules.clone(),
            )),
            drift: RwLock::new(LatestDrift::default()),
            outliers: RwLock::new(OutlierLog::default()),
            feature_names: reference.schema().names().map(str::to_string).collect(),
            output_names: out_names,
            counters: Counters::default(),
        });

        // Build everything fallible before registering any trigger.
        let outlier = OutlierModel::build(config, reference)?;
        let mut drift = build_drift(config, reference, reference_outputs.as_deref())?;

        for s in &config.eventing.sinks {
            chain_sink(&broker, &s.name, s.filter.clone(), s.sink.clone(), s.capacity.unwrap_or(capacity))?;
        }

        let st = Arc::clone(&state);
        broker.register_trigger("stats", Filter::kind(kind::PREDICTION), capacity, move |e| {
            let event: PredictionEvent = serde_json::from_value(e.payload.clone())?;
            st.counters.predictions.fetch_add(1, Ordering::SeqCst);
            let mut s = st.stats.write().unwrap();
            s.lifetime.observe(&event);
            s.windowed.observe_with(event.timestamp, |w| w.observe(&event))?;
            Ok(())
        })?;

        let drift_source = if outlier.is_some() { kind::OUTLIER_VERDICT } else { kind::PREDICTION };
        if let Some(mut model) = outlier {
            let st = Arc::clone(&state);
            let b = broker.clone();
            broker.register_trigger("outlier", Filter::kind(kind::PREDICTION), capacity, move |e| {
                let prediction: PredictionEvent = serde_json::from_value(e.payload.clone())?;
                let verdict = model.score(&prediction);
                if let Some(v) = &verdict {
                    st.counters.outliers_scored.fetch_add(1, Ordering::SeqCst);
                    let mut log = st.outliers.write().unwrap();
                    if v.is_outlier {
                        st.counters.outliers_flagged.fetch_add(1, Ordering::SeqCst);
                        log.flagged.push_back(v.clone());
                        if log.flagged.len() > RECENT_OUTLIERS {
                            log.flagged.pop_front();
                        }
                    }
                    log.latest = Some(v.clone());
                }
                let ts = prediction.timestamp;
                let payload = serde_json::to_value(VerdictPayload { prediction, verdict })?;
                b.publish(Event::new(topic::MONITORING, kind::OUTLIER_VERDICT, payload, ts))?;
                Ok(())
            })?;
        }

        let st = Arc::clone(&state);
        let b = broker.clone();
        broker.register_trigger("drift", Filter::kind(drift_source), capacity, move |e| {
            let prediction = if e.kind == kind::OUTLIER_VERDICT {
                let p: VerdictPayload = serde_json::from_value(e.payload.clone())?;
                if drift.exclude_outliers && p.verdict.as_ref().is_some_and(|v| v.is_outlier) {
                    return Ok(());
                }
                p.prediction
            } else {
                serde_json::from_value(e.payload.clone())?
            };
            drift.push(prediction);
            if drift.records.len() >= drift.batch_size {
                drift.run(&b, &st)?;
            }
            Ok(())
        })?;

        let st = Arc::clone(&state);
        let b = broker.clone();
        broker.register_trigger("performance", Filter::kind(kind::FEEDBACK), capacity, move |e| {
            let feedback: FeedbackEvent = serde_json::from_value(e.payload.clone())?;
            st.counters.feedback.fetch_add(1, Ordering::SeqCst);
            let alerts = st
                .performance
                .write()
                .unwrap()
                .ingest(feedback.predicted, feedback.truth, feedback.timestamp)?;
            for a in &alerts {
                st.counters.performance_alerts.fetch_add(1, Ordering::SeqCst);
                publish_alert(&b, a)?;
            }
            Ok(())
        })?;

        Ok(Self { broker, state })
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn state(&self) -> &Arc<MonitorState> {
        &self.state
    }
}

/// True when the configured detectors need reference model outputs.
pub fn needs_reference_outputs(config: &Config) -> bool {
    config.label_drift.is_some() || config.drift.preprocessor == PreprocessorKind::Bbsd
}

/// Sanity check that an MMD drift configuration can run on this reference.
pub fn drift_method_name(config: &DriftConfig) -> &'static str {
    match config.method {
        DriftMethod::KsFeaturewise => "ks_featurewise",
        DriftMethod::Mmd => "mmd",
    }
}
