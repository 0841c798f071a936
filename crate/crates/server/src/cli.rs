//! Offline commands: `analyze` and `replay`.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use modelwatch_core::drift::{
    Correction, DriftConfig, DriftDetector, DriftError, DriftMethod, DriftReport, PreprocessorKind, Sample,
};
use modelwatch_core::model::{load_reference_set, FeatureSchema, FeatureSpec, ReferenceError};
use modelwatch_core::performance::Alert;
use modelwatch_eventing::{Broker, BrokerError, Event, Filter};
use serde::Serialize;
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::pipeline::{kind, topic};
use crate::service::{build_monitor, ServiceError};
use crate::upstream::{BlockingUpstream, Upstream};
use modelwatch_core::client::ModelClient;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Data {
        path: String,
        #[source]
        source: ReferenceError,
    },
    #[error("drift test failed: {0}")]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error("{path}: line {line}: {message}")]
    Line { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

/// Command-line overrides applied on top of the configured drift settings.
#[derive(Debug, Clone, Default)]
pub struct DriftOverrides {
    pub method: Option<DriftMethod>,
    pub preprocessor: Option<PreprocessorKind>,
    pub correction: Option<Correction>,
    pub alpha: Option<f64>,
    pub min_batch: Option<usize>,
    pub n_permutations: Option<usize>,
    pub projection_dim: Option<usize>,
    pub seed: Option<u64>,
}

impl DriftOverrides {
    pub fn apply(&self, mut c: DriftConfig) -> DriftConfig {
        if let Some(v) = self.method {
            c.method = v;
        }
        if let Some(v) = self.preprocessor {
            c.preprocessor = v;
        }
        if let Some(v) = self.correction {
            c.correction = v;
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.min_batch {
            c.min_batch = v;
        }
        if let Some(v) = self.n_permutations {
            c.n_permutations = v;
        }
        if let Some(v) = self.projection_dim {
            c.projection_dim = Some(v);
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c
    }
}

/// Schema read off a CSV: columns that parse as numbers everywhere are
/// numerical, the rest categorical over the observed tokens.
pub fn infer_schema(path: &Path) -> Result<FeatureSchema, CliError> {
    let io = |source: std::io::Error| CliError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io(std::io::Error::other(e)))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| io(std::io::Error::other(e)))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut numeric = vec![true; header.len()];
    let mut tokens = vec![BTreeSet::new(); header.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Line {
            path: path.display().to_string(),
            line: row + 2,
            message: e.to_string(),
        })?;
        for (j, cell) in rec.iter().enumerate().take(header.len()) {
            let cell = cell.trim();
            if cell.parse::<f64>().is_err() {
                numeric[j] = false;
            }
            tokens[j].insert(cell.to_string());
        }
    }
    let specs = header
        .iter()
        .zip(numeric.iter().zip(tokens))
        .map(|(name, (&num, toks))| {
            if num {
                FeatureSpec::numerical(name)
            } else {
                FeatureSpec::categorical(name, toks)
            }
        })
        .collect();
    FeatureSchema::new(specs).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Run one covariate drift test of `batch` against `reference`.
pub fn analyze(
    reference: &Path,
    batch: &Path,
    config: Option<&Config>,
    overrides: &DriftOverrides,
) -> Result<DriftReport, CliError> {
    let schema = match config {
        Some(c) => c.schema.clone(),
        None => infer_schema(reference)?,
    };
    let load = |p: &Path| {
        load_reference_set(p, &schema).map_err(|source| CliError::Data {
            path: p.display().to_string(),
            source,
        })
    };
    let reference_set = load(reference)?;
    let batch_set = load(batch)?;
    let drift = overrides.apply(config.map(|c| c.drift.clone()).unwrap_or_default());

    if drift.preprocessor == PreprocessorKind::Bbsd {
        let url = config
            .and_then(|c| c.upstream.url.clone())
            .ok_or_else(|| CliError::Usage("black-box reduction needs --config with an upstream url".into()))?;
        let timeout = Duration::from_millis(config.map_or(5_000, |c| c.upstream.timeout_ms));
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(1)
            .enable_all()
            .build()
            .map_err(|source| CliError::Io { path: "runtime".into(), source })?;
        let client = BlockingUpstream::new(Upstream::new(url, timeout), runtime.handle().clone());
        let outputs = client
            .predict(reference_set.records())
            .and_then(|r| Ok((r, client.predict(batch_set.records())?)));
        let (ref_out, batch_out) = outputs.map_err(DriftError::Model)?;
        let reference_set = reference_set
            .with_model_outputs(ref_out)
            .map_err(|e| DriftError::Preprocessor(e.to_string()))?;
        let detector = DriftDetector::covariate(&reference_set, drift, None)?;
        return Ok(detector.detect(Sample::Outputs(&batch_out), 0, 0)?);
    }
    let detector = DriftDetector::covariate(&reference_set, drift, None)?;
    Ok(detector.detect(Sample::Records(batch_set.records()), 0, 0)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowSummary {
    pub stats: u64,
    pub performance: u64,
    pub drift_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplaySummary {
    pub events: usize,
    pub replayed: usize,
    /// Derived monitoring events in the log; they are recomputed, not fed.
    pub skipped: usize,
    pub windows: WindowSummary,
    pub alerts: Vec<Alert>,
    pub drift_reports: Vec<DriftReport>,
    pub published: u64,
    pub dropped: u64,
}

/// Parse a JSONL event log. Blank lines are ignored.
pub fn read_events(path: &Path) -> Result<Vec<Event>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: Event = serde_json::from_str(line).map_err(|e| CliError::Line {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        events.push(e);
    }
    Ok(events)
}

/// Feed prediction and feedback events through a fresh set of consumers.
pub async fn replay(config: &Config, events: Vec<Event>) -> Result<ReplaySummary, CliError> {
    let broker = Broker::new();
    let (_, monitor) = build_monitor(config, broker.clone()).await?;
    let collected: Arc<Mutex<Vec<Event>>> = Arc::default();
    let sink = Arc::clone(&collected);
    broker.register_trigger("replay-collector", Filter::topic(topic::MONITORING), usize::MAX / 2, move |e| {
        if e.kind == kind::ALERT || e.kind == kind::DRIFT_REPORT {
            sink.lock().unwrap().push(e.clone());
        }
        Ok(())
    })?;

    let total = events.len();
    let timeout = Duration::from_millis(config.eventing.drain_timeout_ms);
    // Drain often enough that no consumer queue can overflow.
    let chunk = (config.eventing.queue_capacity / 4).max(1);
    let b = broker.clone();
    let (replayed, skipped) = tokio::task::spawn_blocking(move || -> Result<(usize, usize), BrokerError> {
        let (mut replayed, mut skipped) = (0, 0);
        for e in events {
            if e.kind == kind::PREDICTION || e.kind == kind::FEEDBACK {
                b.publish(e)?;
                replayed += 1;
                if replayed % chunk == 0 {
                    b.drain(timeout)?;
                }
            } else {
                skipped += 1;
            }
        }
        Ok((replayed, skipped))
    })
    .await
    .expect("replay task panicked")?;

    let b = broker.clone();
    let stats = tokio::task::spawn_blocking(move || b.shutdown(timeout))
        .await
        .expect("shutdown task panicked")?;

    let mut alerts = Vec::new();
    let mut drift_reports = Vec::new();
    for e in collected.lock().unwrap().drain(..) {
        if e.kind == kind::ALERT {
            if let Ok(a) = serde_json::from_value::<Alert>(e.payload) {
                alerts.push(a);
            }
        } else if let Ok(r) = serde_json::from_value::<DriftReport>(e.payload) {
            drift_reports.push(r);
        }
    }
    // Consumers run on separate threads; fix a canonical order.
    alerts.sort_by(|a, b| {
        (a.timestamp, a.window, &a.rule)
            .partial_cmp(&(b.timestamp, b.window, &b.rule))
            .unwrap()
    });
    drift_reports.sort_by_key(|r| (r.window, r.kind == modelwatch_core::drift::DriftKind::Label));

    let state = monitor.state();
    Ok(ReplaySummary {
        events: total,
        replayed,
        skipped,
        windows: WindowSummary {
            stats: state.stats_window(),
            performance: state.performance_window(),
            drift_batches: drift_reports.iter().map(|r| r.window).collect::<BTreeSet<_>>().len(),
        },
        alerts,
        drift_reports,
        published: stats.published,
        dropped: stats.dropped(),
    })
}
