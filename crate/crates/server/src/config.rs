//! Service configuration (TOML).

use std::path::{Path, PathBuf};

use modelwatch_core::drift::DriftConfig;
use modelwatch_core::explain::ExplainerConfig;
use modelwatch_core::model::FeatureSchema;
use modelwatch_core::performance::AlertRule;
use modelwatch_core::stream::{WindowScope, DEFAULT_HISTOGRAM_BINS};
use modelwatch_eventing::{Filter, Sink, DEFAULT_QUEUE_CAPACITY};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFIG_ENV: &str = "MODELWATCH_CONFIG";
pub const UPSTREAM_ENV: &str = "MODELWATCH_UPSTREAM_URL";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config `{path}`: {source}")]
    Parse {
        path: String,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub server: ServerConfig,
    #[serde(default)]
    pub upstream: UpstreamConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub schema: FeatureSchema,
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub drift: DriftConfig,
    /// Label drift on model outputs; disabled when absent.
    #[serde(default)]
    pub label_drift: Option<DriftConfig>,
    #[serde(default)]
    pub outlier: OutlierConfig,
    #[serde(default)]
    pub performance: PerformanceConfig,
    #[serde(default)]
    pub explainer: ExplainerSection,
    #[serde(default)]
    pub eventing: EventingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpstreamConfig {
    /// Full URL accepting `{"instances": [...]}`.
    pub url: Option<String>,
    pub timeout_ms: u64,
}

impl Default for UpstreamConfig {
    fn default() -> Self {
        Self {
            url: None,
            timeout_ms: 5_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            task: Task::Classification,
            classes: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub window: WindowScope,
    pub bins: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            window: WindowScope::Count { size: 1_000 },
            bins: DEFAULT_HISTOGRAM_BINS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutlierKind {
    Mahalanobis,
    Knn,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutlierConfig {
    pub detector: OutlierKind,
    pub k: usize,
    pub percentile: f64,
    /// Covariance regularization scale for the Mahalanobis detector.
    pub epsilon: f64,
    pub exclude_from_drift: bool,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        Self {
            detector: OutlierKind::Mahalanobis,
            k: 10,
            percentile: 0.99,
            epsilon: 1e-6,
            exclude_from_drift: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerformanceConfig {
    pub window: WindowScope,
    pub rules: Vec<AlertRule>,
    pub ledger_capacity: usize,
}

impl Default for PerformanceConfig {
    fn default() -> Self {
        Self {
            window: WindowScope::Count { size: 100 },
            rules: Vec::new(),
            ledger_capacity: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerSection {
    /// Separate model copy for explanations; the main upstream when unset.
    pub upstream_url: Option<String>,
    pub timeout_ms: u64,
    pub precision_target: f64,
    pub n_samples: usize,
    pub budget: usize,
    pub seed: u64,
}

impl Default for ExplainerSection {
    fn default() -> Self {
        let d = ExplainerConfig::default();
        Self {
            upstream_url: None,
            timeout_ms: 30_000,
            precision_target: d.precision_target,
            n_samples: d.n_samples,
            budget: d.budget,
            seed: d.seed,
        }
    }
}

impl ExplainerSection {
    pub fn search_config(&self) -> ExplainerConfig {
        ExplainerConfig {
            precision_target: self.precision_target,
            n_samples: self.n_samples,
            budget: self.budget,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkConfig {
    pub name: String,
    #[serde(default)]
    pub filter: Filter,
    pub sink: Sink,
    #[serde(default)]
    pub capacity: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EventingConfig {
    pub queue_capacity: usize,
    pub sinks: Vec<SinkConfig>,
    pub drain_timeout_ms: u64,
}

impl Default for EventingConfig {
    fn default() -> Self {
        Self {
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            sinks: Vec::new(),
            drain_timeout_ms: 30_000,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: "<inline>".into(),
            source: Box::new(e),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Read, validate, resolve relative paths against the file's directory
    /// and apply the upstream URL environment override.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut config: Config = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            source: Box::new(e),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        if let Ok(url) = std::env::var(UPSTREAM_ENV) {
            if !url.is_empty() {
                config.upstream.url = Some(url);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.reference.path);
        for s in &mut self.eventing.sinks {
            match &mut s.sink {
                Sink::Jsonl { path } | Sink::AlertLog { path } => fix(path),
                Sink::Stdout => {}
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.model.task == Task::Classification && self.model.classes < 2 {
            return bad("model.classes must be at least 2 for classification".into());
        }
        if !(self.outlier.percentile > 0.0 && self.outlier.percentile < 1.0) {
            return bad(format!("outlier.percentile must lie in (0, 1), got {}", self.outlier.percentile));
        }
        if self.outlier.k == 0 {
            return bad("outlier.k must be at least 1".into());
        }
        for (name, d) in std::iter::once(("drift", &self.drift)).chain(self.label_drift.iter().map(|d| ("label_drift", d))) {
            if !(d.alpha > 0.0 && d.alpha < 1.0) {
                return bad(format!("{name}.alpha must lie in (0, 1)"));
            }
            if d.min_batch < 2 {
                return bad(format!("{name}.min_batch must be at least 2"));
            }
        }
        if self.eventing.queue_capacity == 0 {
            return bad("eventing.queue_capacity must be at least 1".into());
        }
        if self.performance.ledger_capacity == 0 {
            return bad("performance.ledger_capacity must be at least 1".into());
        }
        if self.stats.bins == 0 {
            return bad("stats.bins must be at least 1".into());
        }
        Ok(())
    }
}
