//! Seeded synthetic reference sets and prediction streams with an injected
//! drift.

use std::path::{Path, PathBuf};

use modelwatch_core::model::{
    validate_record, write_csv, FeatureSchema, FeatureSpec, PredictionEvent, RawValue, Record,
};
use modelwatch_eventing::Event;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{kind, topic};

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("invalid simulation spec: {0}")]
    Invalid(String),
    #[error("spec {path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SimFeature {
    Numerical {
        name: String,
        #[serde(default)]
        mean: f64,
        #[serde(default = "one")]
        std: f64,
    },
    Categorical {
        name: String,
        categories: Vec<String>,
        probabilities: Vec<f64>,
    },
}

fn one() -> f64 {
    1.0
}

impl SimFeature {
    fn name(&self) -> &str {
        match self {
            SimFeature::Numerical { name, .. } | SimFeature::Categorical { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftTransform {
    /// Add `delta` reference standard deviations to a numerical feature.
    MeanShift { feature: String, delta: f64 },
    /// Give `token` probability `probability`; the other categories share
    /// the rest in their original proportions.
    CategorySkew { feature: String, token: String, probability: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub seed: u64,
    pub n_reference: usize,
    pub n_stream: usize,
    /// Stream index of the first transformed row.
    pub drift_point: usize,
    pub transform: Option<DriftTransform>,
    #[serde(default = "default_start")]
    pub start_timestamp: u64,
    #[serde(default = "default_interval")]
    pub interval_ms: u64,
    pub features: Vec<SimFeature>,
}

fn default_start() -> u64 {
    1_700_000_000_000
}

fn default_interval() -> u64 {
    1_000
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub schema: FeatureSchema,
    pub reference: Vec<Record>,
    pub stream: Vec<Event>,
}

impl SimulationSpec {
    pub fn load(path: &Path) -> Result<Self, SimulateError> {
        let text = std::fs::read_to_string(path).map_err(|source| SimulateError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let spec: Self = toml::from_str(&text).map_err(|e| SimulateError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn schema(&self) -> Result<FeatureSchema, SimulateError> {
        let specs = self
            .features
            .iter()
            .map(|f| match f {
                SimFeature::Numerical { name, .. } => FeatureSpec::numerical(name),
                SimFeature::Categorical { name, categories, .. } => FeatureSpec::categorical(name, categories),
            })
            .collect();
        FeatureSchema::new(specs).map_err(|e| SimulateError::Invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: String| Err(SimulateError::Invalid(m));
        if self.features.is_empty() {
            return bad("at least one feature is required".into());
        }
        if self.n_reference < 2 {
            return bad("n_reference must be at least 2".into());
        }
        if self.drift_point > self.n_stream {
            return bad(format!("drift_point {} exceeds n_stream {}", self.drift_point, self.n_stream));
        }
        for f in &self.features {
            match f {
                SimFeature::Numerical { name, mean, std } => {
                    if !mean.is_finite() || !(std.is_finite() && *std > 0.0) {
                        return bad(format!("feature `{name}` needs a finite mean and positive std"));
                    }
                }
                SimFeature::Categorical { name, categories, probabilities } => {
                    if categories.len() != probabilities.len() || categories.is_empty() {
                        return bad(format!("feature `{name}` needs one probability per category"));
                    }
                    let total: f64 = probabilities.iter().sum();
                    if probabilities.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                        return bad(format!("probabilities of `{name}` must be non-negative and sum to 1"));
                    }
                }
            }
        }
        self.schema()?;
        match &self.transform {
            None => {}
            Some(DriftTransform::MeanShift { feature, delta }) => {
                match self.features.iter().find(|f| f.name() == feature) {
                    Some(SimFeature::Numerical { .. }) => {}
                    _ => return bad(format!("mean_shift needs a numerical feature, `{feature}` is not one")),
                }
                if !delta.is_finite() {
                    return bad("mean_shift delta must be finite".into());
                }
            }
            Some(DriftTransform::CategorySkew { feature, token, probability }) => {
                match self.features.iter().find(|f| f.name() == feature) {
                    Some(SimFeature::Categorical { categories, .. }) if categories.contains(token) => {}
                    _ => return bad(format!("category_skew needs categorical feature `{feature}` with token `{token}`")),
                }
                if !(0.0..=1.0).contains(probability) {
                    return bad("category_skew probability must lie in [0, 1]".into());
                }
            }
        }
        Ok(())
    }

    /// Generate the reference set and the stream. Draw order is fixed, so
    /// the output depends on the spec alone.
    pub fn generate(&self) -> Result<Simulation, SimulateError> {
        self.validate()?;
        let schema = self.schema()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);

        let reference: Vec<Vec<Cell>> = (0..self.n_reference).map(|_| self.sample_row(&mut rng, None)).collect();

        // Reference-std units use the sample std of the generated reference.
        let shift = match &self.transform {
            Some(DriftTransform::MeanShift { feature, delta }) => {
                let idx = self.features.iter().position(|f| f.name() == feature).expect("validated");
                let col: Vec<f64> = reference.iter().map(|r| r[idx].as_f64()).collect();
                Some((idx, delta * sample_std(&col)))
            }
            _ => None,
        };
        let skew = match &self.transform {
            Some(DriftTransform::CategorySkew { feature, token, probability }) => {
                let idx = self.features.iter().position(|f| f.name() == feature).expect("validated");
                let SimFeature::Categorical { categories, probabilities, .. } = &self.features[idx] else {
                    unreachable!("validated")
                };
                let t = categories.iter().position(|c| c == token).expect("validated");
                let rest: f64 = probabilities.iter().enumerate().filter(|(i, _)| *i != t).map(|(_, p)| p).sum();
                let skewed: Vec<f64> = probabilities
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        if i == t {
                            *probability
                        } else if rest > 0.0 {
                            p / rest * (1.0 - probability)
                        } else {
                            (1.0 - probability) / (categories.len() - 1).max(1) as f64
                        }
                    })
                    .collect();
                Some((idx, skewed))
            }
            _ => None,
        };

        let mut stream = Vec::with_capacity(self.n_stream);
        for i in 0..self.n_stream {
            let drifted = i >= self.drift_point;
            let mut row = self.sample_row(&mut rng, if drifted { skew.as_ref() } else { None });
            if let (true, Some((idx, by))) = (drifted, shift) {
                row[idx] = Cell::Number(row[idx].as_f64() + by);
            }
            let record = to_record(&row, &schema)?;
            let ts = self.start_timestamp + i as u64 * self.interval_ms;
            let id = format!("sim-{i}");
            let prediction = PredictionEvent {
                request_id: id.clone(),
                timestamp: ts,
                record,
                model_output: Vec::new(),
                predicted_label: None,
            };
            let payload = serde_json::to_value(&prediction).map_err(|e| SimulateError::Invalid(e.to_string()))?;
            let mut event = Event::new(topic::PREDICTIONS, kind::PREDICTION, payload, ts);
            event.id = id;
            stream.push(event);
        }
        let reference = reference
            .iter()
            .map(|r| to_record(r, &schema))
            .collect::<Result<_, _>>()?;
        Ok(Simulation { schema, reference, stream })
    }

    fn sample_row(&self, rng: &mut ChaCha8Rng, skew: Option<&(usize, Vec<f64>)>) -> Vec<Cell> {
        self.features
            .iter()
            .enumerate()
            .map(|(j, f)| match f {
                SimFeature::Numerical { mean, std, .. } => {
                    let z: f64 = StandardNormal.sample(rng);
                    Cell::Number(mean + std * z)
                }
                SimFeature::Categorical { categories, probabilities, .. } => {
                    let probs = match skew {
                        Some((idx, p)) if *idx == j => p.as_slice(),
                        _ => probabilities.as_slice(),
                    };
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = categories.len() - 1;
                    for (k, p) in probs.iter().enumerate() {
                        acc += p;
                        if u < acc {
                            pick = k;
                            break;
                        }
                    }
                    Cell::Token(categories[pick].clone())
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Cell {
    Number(f64),
    Token(String),
}

impl Cell {
    fn as_f64(&self) -> f64 {
        match self {
            Cell::Number(x) => *x,
            Cell::Token(_) => f64::NAN,
        }
    }
}

fn to_record(row: &[Cell], schema: &FeatureSchema) -> Result<Record, SimulateError> {
    let raw: Vec<RawValue> = row
        .iter()
        .map(|c| match c {
            Cell::Number(x) => RawValue::Number(*x),
            Cell::Token(t) => RawValue::Text(t.clone()),
        })
        .collect();
    validate_record(&raw, schema).map_err(|e| SimulateError::Invalid(e.to_string()))
}

fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Paths written by [`write_simulation`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationFiles {
    pub reference: PathBuf,
    pub stream: PathBuf,
    pub config: PathBuf,
}

/// Write `reference.csv`, `stream.jsonl` and a starter `config.toml`.
pub fn write_simulation(sim: &Simulation, out: &Path) -> Result<SimulationFiles, SimulateError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| SimulateError::Io { path, source }
    };
    std::fs::create_dir_all(out).map_err(io(out))?;
    let files = SimulationFiles {
        reference: out.join("reference.csv"),
        stream: out.join("stream.jsonl"),
        config: out.join("config.toml"),
    };

    let f = std::fs::File::create(&files.reference).map_err(io(&files.reference))?;
    write_csv(std::io::BufWriter::new(f), &sim.schema, &sim.reference).map_err(|e| SimulateError::Io {
        path: files.reference.display().to_string(),
        source: std::io::Error::other(e),
    })?;

    let mut lines = String::new();
    for e in &sim.stream {
        lines.push_str(&serde_json::to_string(e).expect("events serialise"));
        lines.push('\n');
    }
    std::fs::write(&files.stream, lines).map_err(io(&files.stream))?;
    std::fs::write(&files.config, config_template(&sim.schema)).map_err(io(&files.config))?;
    Ok(files)
}

fn config_template(schema: &FeatureSchema) -> String {
    let mut s = String::from("# Generated by `modelwatch simulate`.\n\n[schema]\nfeatures = [\n");
    for f in schema.features() {
        match f.categories() {
            None => s.push_str(&format!("  {{ name = {:?}, kind = \"numerical\" }},\n", f.name)),
            Some(c) => s.push_str(&format!(
                "  {{ name = {:?}, kind = \"categorical\", categories = {:?} }},\n",
                f.name, c
            )),
        }
    }
    s.push_str(
        "]\n\n[reference]\npath = \"reference.csv\"\n\n[drift]\nmethod = \"ks_featurewise\"\ncorrection = \"bonferroni\"\nalpha = 0.01\nmin_batch = 500\nseed = 0\n\n[outlier]\ndetector = \"mahalanobis\"\npercentile = 0.99\n",
    );
    s
}
