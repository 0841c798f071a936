//! Online accumulators for live feature data: moments, approximate
//! histograms, categorical frequencies, and tumbling windows over any of them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FeatureKind, FeatureSchema, Record, TimestampMs, Value};

#[derive(Debug, Error, PartialEq)]
pub enum StreamError {
    #[error("sketch is empty")]
    EmptySketch,
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("clock regression: timestamp {timestamp} is more than 1s before {last}")]
    ClockRegression { last: TimestampMs, timestamp: TimestampMs },
    #[error("quantile {0} outside [0, 1]")]
    InvalidQuantile(f64),
}

/// Single-pass mean and variance (Welford), plus extremes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentAccumulator {
    count: u64,
    mean: f64,
    m2: f64,
    min: f64,
    max: f64,
}

impl Default for MomentAccumulator {
    fn default() -> Self {
        Self {
            count: 0,
            mean: 0.0,
            m2: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl MomentAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
        self.min = self.min.min(x);
        self.max = self.max.max(x);
    }

    /// Combine two partial accumulations (Chan et al. pairwise update).
    pub fn merge(&self, other: &Self) -> Self {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let delta = other.mean - self.mean;
        // Weighted mean is symmetric in (a, b), unlike mean_a + delta * nb / n.
        let mean = (na * self.mean + nb * other.mean) / n;
        let m2 = self.m2 + other.m2 + delta * delta * na * nb / n;
        Self {
            count: self.count + other.count,
            mean,
            m2,
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then_some(self.mean)
    }

    pub fn m2(&self) -> f64 {
        self.m2
    }

    /// Sample variance (divisor n−1); undefined below two observations.
    pub fn variance(&self) -> Option<f64> {
        (self.count >= 2).then(|| self.m2 / (self.count - 1) as f64)
    }

    pub fn std_dev(&self) -> Option<f64> {
        self.variance().map(f64::sqrt)
    }

    pub fn min(&self) -> Option<f64> {
        (self.count > 0).then_some(self.min)
    }

    pub fn max(&self) -> Option<f64> {
        (self.count > 0).then_some(self.max)
    }
}

pub const DEFAULT_HISTOGRAM_BINS: usize = 64;

/// Bounded-size histogram of a numeric stream, merging the closest pair of
/// centroids whenever the bin budget is exceeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamingHistogram {
    max_bins: usize,
    bins: Vec<(f64, u64)>,
    total: u64,
}

impl Default for StreamingHistogram {
    fn default() -> Self {
        Self::new(DEFAULT_HISTOGRAM_BINS)
    }
}

impl StreamingHistogram {
    pub fn new(max_bins: usize) -> Self {
        assert!(max_bins >= 1, "histogram needs at least one bin");
        Self {
            max_bins,
            bins: Vec::with_capacity(max_bins + 1),
            total: 0,
        }
    }

    pub fn max_bins(&self) -> usize {
        self.max_bins
    }

    pub fn bins(&self) -> &[(f64, u64)] {
        &self.bins
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn update(&mut self, x: f64) {
        self.insert_bin(x, 1);
        self.compress();
    }

    /// Fold another histogram's bins into this one.
    pub fn merge(&mut self, other: &StreamingHistogram) {
        for &(c, n) in &other.bins {
            self.insert_bin(c, n);
        }
        self.compress();
    }

    fn insert_bin(&mut self, x: f64, count: u64) {
        self.total += count;
        match self.bins.binary_search_by(|(c, _)| c.total_cmp(&x)) {
            Ok(i) => self.bins[i].1 += count,
            Err(i) => self.bins.insert(i, (x, count)),
        }
    }

    fn compress(&mut self) {
        while self.bins.len() > self.max_bins {
            let i = (0..self.bins.len() - 1)
                .min_by(|&a, &b| {
                    let ga = self.bins[a + 1].0 - self.bins[a].0;
                    let gb = self.bins[b + 1].0 - self.bins[b].0;
                    ga.total_cmp(&gb)
                })
                .expect("at least two bins when over budget");
            let (c1, n1) = self.bins[i];
            let (c2, n2) = self.bins.remove(i + 1);
            let n = n1 + n2;
            self.bins[i] = ((c1 * n1 as f64 + c2 * n2 as f64) / n as f64, n);
        }
    }

    /// Quantile estimate treating each bin as a point mass at its centroid,
    /// interpolating linearly between adjacent ranks.
    pub fn quantile(&self, q: f64) -> Result<f64, StreamError> {
        if !(0.0..=1.0).contains(&q) {
            return Err(StreamError::InvalidQuantile(q));
        }
        if self.total == 0 {
            return Err(StreamError::EmptySketch);
        }
        let rank = q * (self.total - 1) as f64;
        let lo = rank.floor() as u64;
        let hi = rank.ceil() as u64;
        let frac = rank - lo as f64;
        let a = self.value_at_rank(lo);
        let b = self.value_at_rank(hi);
        Ok(a + (b - a) * frac)
    }

    fn value_at_rank(&self, rank: u64) -> f64 {
        let mut seen = 0;
        for &(c, n) in &self.bins {
            seen += n;
            if rank < seen {
                return c;
            }
        }
        self.bins.last().map(|b| b.0).unwrap_or(f64::NAN)
    }
}

/// Counts per declared category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    categories: Vec<String>,
    counts: BTreeMap<String, u64>,
    total: u64,
}

impl FrequencyTable {
    pub fn new<S: Into<String>>(categories: impl IntoIterator<Item = S>) -> Self {
        Self {
            categories: categories.into_iter().map(Into::into).collect(),
            counts: BTreeMap::new(),
            total: 0,
        }
    }

    /// Build from explicit counts; every key must be a declared category.
    pub fn from_counts<S: Into<String>>(
        categories: impl IntoIterator<Item = S>,
        counts: impl IntoIterator<Item = (S, u64)>,
    ) -> Result<Self, StreamError> {
        let mut t = Self::new(categories);
        for (c, n) in counts {
            let c = c.into();
            if !t.categories.contains(&c) {
                return Err(StreamError::UnknownCategory(c));
            }
            if n > 0 {
                *t.counts.entry(c).or_default() += n;
                t.total += n;
            }
        }
        Ok(t)
    }

    pub fn update(&mut self, token: &str) -> Result<(), StreamError> {
        if !self.categories.iter().any(|c| c == token) {
            return Err(StreamError::UnknownCategory(token.to_string()));
        }
        *self.counts.entry(token.to_string()).or_default() += 1;
        self.total += 1;
        Ok(())
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn count(&self, token: &str) -> u64 {
        self.counts.get(token).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

/// Per-feature sketch: moments plus histogram for numerical features,
/// frequencies for categorical ones.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSketch {
    Numerical {
        moments: MomentAccumulator,
        histogram: StreamingHistogram,
    },
    Categorical(FrequencyTable),
}

impl FeatureSketch {
    pub fn numerical(max_bins: usize) -> Self {
        FeatureSketch::Numerical {
            moments: MomentAccumulator::new(),
            histogram: StreamingHistogram::new(max_bins),
        }
    }

    pub fn observe(&mut self, value: &Value) -> Result<(), StreamError> {
        match (self, value) {
            (FeatureSketch::Numerical { moments, histogram }, Value::Num(x)) => {
                moments.update(*x);
                histogram.update(*x);
                Ok(())
            }
            (FeatureSketch::Categorical(t), Value::Cat(tok)) => t.update(tok),
            (_, v) => Err(StreamError::UnknownCategory(v.to_string())),
        }
    }

    pub fn snapshot(&self) -> SketchSnapshot {
        match self {
            FeatureSketch::Numerical { moments, histogram } => SketchSnapshot {
                count: moments.count(),
                mean: moments.mean(),
                variance: moments.variance(),
                min: moments.min(),
                max: moments.max(),
                histogram: histogram.bins().iter().map(|&(c, n)| (c, n)).collect(),
                frequencies: BTreeMap::new(),
            },
            FeatureSketch::Categorical(t) => SketchSnapshot {
                count: t.total(),
                mean: None,
                variance: None,
                min: None,
                max: None,
                histogram: Vec::new(),
                frequencies: t.counts().clone(),
            },
        }
    }
}

/// JSON view of one feature sketch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SketchSnapshot {
    pub count: u64,
    pub mean: Option<f64>,
    pub variance: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub histogram: Vec<(f64, u64)>,
    pub frequencies: BTreeMap<String, u64>,
}

/// Sketches for every feature of a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSketch {
    names: Vec<String>,
    features: Vec<FeatureSketch>,
}

impl RecordSketch {
    pub fn new(schema: &FeatureSchema, max_bins: usize) -> Self {
        let features = schema
            .features()
            .iter()
            .map(|f| match &f.kind {
                FeatureKind::Numerical => FeatureSketch::numerical(max_bins),
                FeatureKind::Categorical { categories } => {
                    FeatureSketch::Categorical(FrequencyTable::new(categories.iter().cloned()))
                }
            })
            .collect();
        Self {
            names: schema.names().map(str::to_string).collect(),
            features,
        }
    }

    /// Numerical-only sketch over named dimensions, e.g. model outputs.
    pub fn numerical(names: Vec<String>, max_bins: usize) -> Self {
        let features = names.iter().map(|_| FeatureSketch::numerical(max_bins)).collect();
        Self { names, features }
    }

    pub fn observe(&mut self, record: &Record) -> Result<(), StreamError> {
        for (sketch, value) in self.features.iter_mut().zip(record.values()) {
            sketch.observe(value)?;
        }
        Ok(())
    }

    pub fn observe_vector(&mut self, values: &[f64]) {
        for (sketch, &x) in self.features.iter_mut().zip(values) {
            if let FeatureSketch::Numerical { moments, histogram } = sketch {
                moments.update(x);
                histogram.update(x);
            }
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureSketch> {
        self.names.iter().position(|n| n == name).map(|i| &self.features[i])
    }

    pub fn snapshot(&self) -> BTreeMap<String, SketchSnapshot> {
        self.names
            .iter()
            .cloned()
            .zip(self.features.iter().map(FeatureSketch::snapshot))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WindowScope {
    Lifetime,
    Count { size: u64 },
    Duration { millis: u64 },
}

/// Tolerated backwards clock skew before an observation is rejected.
pub const CLOCK_TOLERANCE_MS: u64 = 1_000;

/// A sketch with lifetime or tumbling-window scope. On rotation the current
/// sketch becomes the last completed one and a fresh sketch starts.
#[derive(Debug, Clone)]
pub struct WindowedSketch<S> {
    scope: WindowScope,
    empty: S,
    current: S,
    last_completed: Option<S>,
    sequence: u64,
    in_window: u64,
    origin: Option<TimestampMs>,
    last_timestamp: Option<TimestampMs>,
}

impl<S: Clone> WindowedSketch<S> {
    pub fn new(scope: WindowScope, empty: S) -> Self {
        Self {
            scope,
            current: empty.clone(),
            empty,
            last_completed: None,
            sequence: 0,
            in_window: 0,
            origin: None,
            last_timestamp: None,
        }
    }

    /// Apply `update` to the current window, rotating first when the
    /// observation falls past the window boundary. Returns true on rotation.
    pub fn observe_with<F>(&mut self, timestamp: TimestampMs, update: F) -> Result<bool, StreamError>
    where
        F: FnOnce(&mut S),
    {
        if let Some(last) = self.last_timestamp {
            if timestamp + CLOCK_TOLERANCE_MS < last {
                return Err(StreamError::ClockRegression { last, timestamp });
            }
        }
        let origin = *self.origin.get_or_insert(timestamp);
        let rotated = match self.scope {
            WindowScope::Lifetime => false,
            WindowScope::Count { size } => {
                if self.in_window >= size {
                    self.rotate(self.sequence + 1);
                    true
                } else {
                    false
                }
            }
            WindowScope::Duration { millis } => {
                let index = timestamp.saturating_sub(origin) / millis.max(1);
                if index > self.sequence {
                    self.rotate(index);
                    true
                } else {
                    false
                }
            }
        };
        update(&mut self.current);
        self.in_window += 1;
        self.last_timestamp = Some(self.last_timestamp.map_or(timestamp, |l| l.max(timestamp)));
        Ok(rotated)
    }

    fn rotate(&mut self, next_sequence: u64) {
        let done = std::mem::replace(&mut self.current, self.empty.clone());
        self.last_completed = Some(done);
        self.sequence = next_sequence;
        self.in_window = 0;
    }

    pub fn scope(&self) -> WindowScope {
        self.scope
    }

    pub fn current(&self) -> &S {
        &self.current
    }

    pub fn last_completed(&self) -> Option<&S> {
        self.last_completed.as_ref()
    }

    /// Sequence number of the current window. Duration windows are numbered
    /// by boundary index, so skipped idle windows show up as gaps.
    pub fn sequence(&self) -> u64 {
        self.sequence
    }

    pub fn in_window(&self) -> u64 {
        self.in_window
    }
}

impl<S: Clone> WindowedSketch<Vec<S>> {
    pub fn observe(&mut self, timestamp: TimestampMs, x: S) -> Result<bool, StreamError> {
        self.observe_with(timestamp, |w| w.push(x))
    }
}
