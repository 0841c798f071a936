//! Label-dependent model performance: confusion matrices, regression error
//! sums, windowed tracking and threshold alerts.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Target, TimestampMs};
use crate::stream::{StreamError, WindowScope, WindowedSketch};

#[derive(Debug, Error, PartialEq)]
pub enum PerformanceError {
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: u64, classes: usize },
    #[error("feedback does not match the model task")]
    TaskMismatch,
    #[error("no feedback ingested yet")]
    EmptyState,
    #[error("unknown metric `{0}`")]
    UnknownMetricName(String),
    #[error(transparent)]
    Window(#[from] StreamError),
}

/// Counts indexed `[truth][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    cells: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            cells: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.cells[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.cells.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    fn check(&self, label: u64) -> Result<usize, PerformanceError> {
        if (label as usize) < self.classes {
            Ok(label as usize)
        } else {
            Err(PerformanceError::LabelOutOfRange {
                label,
                classes: self.classes,
            })
        }
    }

    pub fn ingest(&mut self, predicted: u64, truth: u64) -> Result<(), PerformanceError> {
        let p = self.check(predicted)?;
        let t = self.check(truth)?;
        self.cells[t * self.classes + p] += 1;
        Ok(())
    }

    fn row_sum(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.get(class, p)).sum()
    }

    fn col_sum(&self, class: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, class)).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RegressionErrorState {
    count: u64,
    sum_abs: f64,
    sum_sq: f64,
}

impl RegressionErrorState {
    pub fn ingest(&mut self, predicted: f64, truth: f64) -> Result<(), PerformanceError> {
        if !predicted.is_finite() || !truth.is_finite() {
            return Err(PerformanceError::TaskMismatch);
        }
        let e = predicted - truth;
        self.count += 1;
        self.sum_abs += e.abs();
        self.sum_sq += e * e;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mae(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum_abs / self.count as f64)
    }

    pub fn rmse(&self) -> Option<f64> {
        (self.count > 0).then(|| (self.sum_sq / self.count as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerformanceState {
    Classification(ConfusionMatrix),
    Regression(RegressionErrorState),
}

impl PerformanceState {
    pub fn classification(classes: usize) -> Self {
        PerformanceState::Classification(ConfusionMatrix::new(classes))
    }

    pub fn regression() -> Self {
        PerformanceState::Regression(RegressionErrorState::default())
    }

    pub fn ingest(&mut self, predicted: Target, truth: Target) -> Result<(), PerformanceError> {
        match self {
            PerformanceState::Classification(m) => match (predicted, truth) {
                (Target::Class(p), Target::Class(t)) => m.ingest(p, t),
                _ => Err(PerformanceError::TaskMismatch),
            },
            PerformanceState::Regression(r) => r.ingest(predicted.as_real(), truth.as_real()),
        }
    }

    pub fn count(&self) -> u64 {
        match self {
            PerformanceState::Classification(m) => m.total(),
            PerformanceState::Regression(r) => r.count(),
        }
    }
}

/// Metric values of one state. `None` marks metrics that are undefined
/// (division by zero); every defined metric name is present as a key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub window: u64,
    pub count: u64,
    pub values: BTreeMap<String, Option<f64>>,
}

impl MetricSnapshot {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied().flatten()
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn classification_report(matrix: &ConfusionMatrix, window: u64) -> Result<MetricSnapshot, PerformanceError> {
    let total = matrix.total();
    if total == 0 {
        return Err(PerformanceError::EmptyState);
    }
    let mut values = BTreeMap::new();
    values.insert("accuracy".to_string(), Some(matrix.trace() as f64 / total as f64));
    let mut f1s = Vec::new();
    for c in 0..matrix.classes() {
        let tp = matrix.get(c, c);
        let precision = ratio(tp, matrix.col_sum(c));
        let recall = ratio(tp, matrix.row_sum(c));
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        if let Some(f) = f1 {
            f1s.push(f);
        }
        values.insert(format!("precision_{c}"), precision);
        values.insert(format!("recall_{c}"), recall);
        values.insert(format!("f1_{c}"), f1);
    }
    let macro_f1 = (!f1s.is_empty()).then(|| f1s.iter().sum::<f64>() / f1s.len() as f64);
    values.insert("macro_f1".to_string(), macro_f1);
    // Single-label micro-F1 reduces to accuracy.
    values.insert("micro_f1".to_string(), Some(matrix.trace() as f64 / total as f64));
    Ok(MetricSnapshot {
        window,
        count: total,
        values,
    })
}

pub fn regression_report(state: &RegressionErrorState, window: u64) -> Result<MetricSnapshot, PerformanceError> {
    if state.count() == 0 {
        return Err(PerformanceError::EmptyState);
    }
    let mut values = BTreeMap::new();
    values.insert("mae".to_string(), state.mae());
    values.insert("rmse".to_string(), state.rmse());
    Ok(MetricSnapshot {
        window,
        count: state.count(),
        values,
    })
}

pub fn report(state: &PerformanceState, window: u64) -> Result<MetricSnapshot, PerformanceError> {
    match state {
        PerformanceState::Classification(m) => classification_report(m, window),
        PerformanceState::Regression(r) => regression_report(r, window),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<")]
    Below,
    #[serde(rename = ">")]
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRule {
    pub name: String,
    pub metric: String,
    pub comparator: Comparator,
    pub threshold: f64,
    #[serde(default = "default_min_count")]
    pub min_count: u64,
}

fn default_min_count() -> u64 {
    1
}

impl AlertRule {
    pub fn new(name: &str, metric: &str, comparator: Comparator, threshold: f64, min_count: u64) -> Self {
        Self {
            name: name.into(),
            metric: metric.into(),
            comparator,
            threshold,
            min_count,
        }
    }

    fn violated_by(&self, value: f64) -> bool {
        match self.comparator {
            Comparator::Below => value < self.threshold,
            Comparator::Above => value > self.threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub rule: String,
    pub metric: String,
    pub value: f64,
    pub threshold: f64,
    pub window: u64,
    pub timestamp: TimestampMs,
}

/// One alert per violated rule. Rules gated by `min_count` and rules whose
/// metric is undefined on this snapshot are skipped.
pub fn evaluate_alert_rules(
    snapshot: &MetricSnapshot,
    rules: &[AlertRule],
    timestamp: TimestampMs,
) -> Result<Vec<Alert>, PerformanceError> {
    let mut alerts = Vec::new();
    for rule in rules {
        let value = snapshot
            .values
            .get(&rule.metric)
            .ok_or_else(|| PerformanceError::UnknownMetricName(rule.metric.clone()))?;
        if snapshot.count < rule.min_count {
            continue;
        }
        if let Some(v) = value {
            if rule.violated_by(*v) {
                alerts.push(Alert {
                    rule: rule.name.clone(),
                    metric: rule.metric.clone(),
                    value: *v,
                    threshold: rule.threshold,
                    window: snapshot.window,
                    timestamp,
                });
            }
        }
    }
    Ok(alerts)
}

/// Deployment-specific metric computed from the same state as the built-in
/// ones. Registered metrics appear in every snapshot under `name` and can be
/// referenced by alert rules.
pub trait CustomMetric: Send + Sync {
    fn name(&self) -> &str;
    fn compute(&self, state: &PerformanceState) -> Option<f64>;
}

impl fmt::Debug for dyn CustomMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CustomMetric({})", self.name())
    }
}

/// Lifetime and windowed performance state with edge-triggered alerting:
/// each rule fires at most once per window.
#[derive(Debug, Clone)]
pub struct PerformanceTracker {
    lifetime: PerformanceState,
    windowed: WindowedSketch<PerformanceState>,
    rules: Vec<AlertRule>,
    custom: Vec<Arc<dyn CustomMetric>>,
    fired: HashSet<(String, u64)>,
}

impl PerformanceTracker {
    pub fn new(empty: PerformanceState, scope: WindowScope, rules: Vec<AlertRule>) -> Self {
        Self {
            lifetime: empty.clone(),
            windowed: WindowedSketch::new(scope, empty),
            rules,
            custom: Vec::new(),
            fired: HashSet::new(),
        }
    }

    pub fn with_metric(mut self, metric: Arc<dyn CustomMetric>) -> Self {
        self.custom.push(metric);
        self
    }

    /// Built-in report of `state` extended with the registered custom metrics.
    pub fn snapshot(&self, state: &PerformanceState, window: u64) -> Result<MetricSnapshot, PerformanceError> {
        let mut snap = report(state, window)?;
        for m in &self.custom {
            snap.values.insert(m.name().to_string(), m.compute(state));
        }
        Ok(snap)
    }

    /// Ingest one feedback pair and return alerts newly raised on the
    /// current window.
    pub fn ingest(
        &mut self,
        predicted: Target,
        truth: Target,
        timestamp: TimestampMs,
    ) -> Result<Vec<Alert>, PerformanceError> {
        // Validate against a scratch copy so bad feedback never rotates a window.
        self.lifetime.clone().ingest(predicted, truth)?;
        let rotated = self
            .windowed
            .observe_with(timestamp, |s| s.ingest(predicted, truth).expect("validated above"))?;
        self.lifetime.ingest(predicted, truth).expect("validated above");
        if rotated {
            let current = self.windowed.sequence();
            self.fired.retain(|(_, w)| *w + 1 >= current);
        }
        let snapshot = self.snapshot(self.windowed.current(), self.windowed.sequence())?;
        let alerts = evaluate_alert_rules(&snapshot, &self.rules, timestamp)?;
        Ok(alerts
            .into_iter()
            .filter(|a| self.fired.insert((a.rule.clone(), a.window)))
            .collect())
    }

    pub fn lifetime(&self) -> &PerformanceState {
        &self.lifetime
    }

    pub fn current(&self) -> &PerformanceState {
        self.windowed.current()
    }

    pub fn last_completed(&self) -> Option<&PerformanceState> {
        self.windowed.last_completed()
    }

    pub fn window(&self) -> u64 {
        self.windowed.sequence()
    }

    pub fn rules(&self) -> &[AlertRule] {
        &self.rules
    }
}
