//! Two-sample drift detection between a reference sample and live batches.
//!
//! Two test families are available:
//!
//! * feature-wise: a Kolmogorov–Smirnov test per numerical dimension and a
//!   chi-square homogeneity test per categorical feature, with Bonferroni or
//!   Benjamini–Hochberg correction across the whole family;
//! * multivariate: unbiased MMD² with an RBF kernel (median-heuristic
//!   bandwidth) and a permutation p-value.
//!
//! Either family can run on raw features, on a seeded random projection, or
//! on the model's output probabilities (black-box shift detection). Label
//! drift uses the same machinery on model output vectors.

mod chi2;
mod correction;
mod ks;
mod mmd;
mod projection;

pub use chi2::chi2_two_sample;
pub use correction::{correct_bonferroni, correct_fdr_bh};
pub use ks::{ks_pvalue, ks_statistic};
pub use mmd::{
    median_heuristic, mmd2_unbiased, mmd_permutation_test, permutation_pvalue, rbf, squared_distance,
    MmdOutcome,
};
pub use projection::{project_random, RandomProjection};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ModelClient, ModelError};
use crate::model::{dense_names, dense_vector, FeatureKind, Record, ReferenceSet, TimestampMs, Value};
use crate::stream::FrequencyTable;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DriftError {
    #[error("sample is empty")]
    EmptySample,
    #[error("need at least two points per sample")]
    SampleTooSmall,
    #[error("all points are identical")]
    DegenerateSample,
    #[error("fewer than two usable categories")]
    DegenerateTable,
    #[error("kernel bandwidth must be positive, got {0}")]
    InvalidBandwidth(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch of {got} records is below the minimum of {min}")]
    InsufficientBatch { got: usize, min: usize },
    #[error("preprocessor failed: {0}")]
    Preprocessor(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    Covariate,
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriftMethod {
    #[serde(rename = "ks_featurewise", alias = "ks")]
    KsFeaturewise,
    #[serde(rename = "mmd")]
    Mmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correction {
    Bonferroni,
    #[serde(alias = "fdr")]
    FdrBh,
}

impl Correction {
    pub fn apply(self, pvalues: &[f64], alpha: f64) -> Vec<bool> {
        match self {
            Correction::Bonferroni => correct_bonferroni(pvalues, alpha),
            Correction::FdrBh => correct_fdr_bh(pvalues, alpha),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessorKind {
    Identity,
    RandomProjection,
    Bbsd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftConfig {
    pub method: DriftMethod,
    pub preprocessor: PreprocessorKind,
    /// Output dimension of the random projection.
    pub projection_dim: Option<usize>,
    pub alpha: f64,
    pub correction: Correction,
    pub min_batch: usize,
    pub n_permutations: usize,
    pub seed: u64,
    /// Maximum reference points used by the MMD test.
    pub reference_cap: usize,
    /// Fixed RBF bandwidth σ²; the median heuristic is used when unset.
    pub bandwidth: Option<f64>,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            method: DriftMethod::KsFeaturewise,
            preprocessor: PreprocessorKind::Identity,
            projection_dim: None,
            alpha: 0.05,
            correction: Correction::Bonferroni,
            min_batch: 100,
            n_permutations: 100,
            seed: 0,
            reference_cap: 2_000,
            bandwidth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTest {
    pub name: String,
    /// "ks" or "chi2".
    pub test: String,
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub kind: DriftKind,
    pub method: DriftMethod,
    pub correction: Correction,
    pub alpha: f64,
    pub drift_detected: bool,
    /// Dimensions the test ran on, after preprocessing.
    pub feature_space: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub features: Vec<FeatureTest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd: Option<MmdOutcome>,
    pub n_reference: usize,
    pub n_test: usize,
    pub window: u64,
    pub timestamp: TimestampMs,
}

impl DriftReport {
    pub fn rejected_features(&self) -> Vec<&str> {
        self.features.iter().filter(|f| f.reject).map(|f| f.name.as_str()).collect()
    }
}

/// Sample handed to a detector: raw records (covariate drift) or model
/// output vectors (label drift, or covariate drift through BBSD).
#[derive(Debug, Clone, Copy)]
pub enum Sample<'a> {
    Records(&'a [Record]),
    Outputs(&'a [Vec<f64>]),
}

impl Sample<'_> {
    pub fn len(&self) -> usize {
        match self {
            Sample::Records(r) => r.len(),
            Sample::Outputs(o) => o.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
enum Column {
    /// Sorted values.
    Numerical(Vec<f64>),
    Categorical(FrequencyTable),
}

#[derive(Debug, Clone)]
enum Prepared {
    Featurewise(Vec<Column>),
    Vectors(Vec<Vec<f64>>),
}

#[derive(Debug, Clone)]
enum Transform {
    /// Schema features as-is (records only).
    Schema,
    /// Dense one-hot encoding of records, or output vectors as they are.
    Dense,
    Project(RandomProjection),
    /// Records go through the model; outputs are used directly.
    Model,
}

/// Reference-side state of a drift test, prepared once and reused for every
/// live batch.
pub struct DriftDetector {
    kind: DriftKind,
    config: DriftConfig,
    reference: ReferenceSet,
    transform: Transform,
    space: Vec<String>,
    prepared: Prepared,
    n_reference: usize,
    model: Option<Box<dyn ModelClient>>,
}

impl std::fmt::Debug for DriftDetector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DriftDetector")
            .field("kind", &self.kind)
            .field("config", &self.config)
            .field("space", &self.space)
            .field("n_reference", &self.n_reference)
            .finish()
    }
}

impl DriftDetector {
    /// Covariate-drift detector over the reference records. BBSD needs either
    /// model outputs stored on the reference set or a model client.
    pub fn covariate(
        reference: &ReferenceSet,
        config: DriftConfig,
        model: Option<Box<dyn ModelClient>>,
    ) -> Result<Self, DriftError> {
        let schema = reference.schema();
        let (transform, space, ref_outputs) = match config.preprocessor {
            PreprocessorKind::Identity => {
                let space = match config.method {
                    DriftMethod::KsFeaturewise => schema.names().map(str::to_string).collect(),
                    DriftMethod::Mmd => dense_names(schema),
                };
                let transform = match config.method {
                    DriftMethod::KsFeaturewise => Transform::Schema,
                    DriftMethod::Mmd => Transform::Dense,
                };
                (transform, space, None)
            }
            PreprocessorKind::RandomProjection => {
                let d = dense_names(schema).len();
                let k = config.projection_dim.unwrap_or(d);
                let p = RandomProjection::new(d, k, config.seed)
                    .map_err(|e| DriftError::Preprocessor(e.to_string()))?;
                (Transform::Project(p), (0..k).map(|i| format!("rp_{i}")).collect(), None)
            }
            PreprocessorKind::Bbsd => {
                let outputs = match (reference.model_outputs(), &model) {
                    (Some(o), _) => o.to_vec(),
                    (None, Some(m)) => m
                        .predict(reference.records())
                        .map_err(|e| DriftError::Preprocessor(e.to_string()))?,
                    (None, None) => {
                        return Err(DriftError::Preprocessor(
                            "black-box reduction needs reference model outputs or a model client".into(),
                        ))
                    }
                };
                let k = outputs.first().map_or(0, Vec::len);
                (Transform::Model, (0..k).map(|i| format!("class_{i}")).collect(), Some(outputs))
            }
        };
        let mut detector = Self {
            kind: DriftKind::Covariate,
            config,
            reference: reference.clone(),
            transform,
            space,
            prepared: Prepared::Vectors(Vec::new()),
            n_reference: 0,
            model,
        };
        let prepared = match ref_outputs {
            Some(outputs) => detector.prepare(Sample::Outputs(&outputs), true)?,
            None => detector.prepare(Sample::Records(reference.records()), true)?,
        };
        detector.n_reference = prepared.1;
        detector.prepared = prepared.0;
        Ok(detector)
    }

    /// Label-drift detector over reference model outputs.
    pub fn label(reference: &ReferenceSet, reference_outputs: Vec<Vec<f64>>, config: DriftConfig) -> Result<Self, DriftError> {
        let k = reference_outputs.first().map_or(0, Vec::len);
        if k == 0 {
            return Err(DriftError::EmptySample);
        }
        let (transform, space) = match config.preprocessor {
            PreprocessorKind::RandomProjection => {
                let out = config.projection_dim.unwrap_or(k);
                let p = RandomProjection::new(k, out, config.seed)
                    .map_err(|e| DriftError::Preprocessor(e.to_string()))?;
                (Transform::Project(p), (0..out).map(|i| format!("rp_{i}")).collect())
            }
            // Outputs already live in the model-output space.
            PreprocessorKind::Identity | PreprocessorKind::Bbsd => {
                (Transform::Dense, (0..k).map(|i| format!("class_{i}")).collect())
            }
        };
        let mut detector = Self {
            kind: DriftKind::Label,
            config,
            reference: reference.clone(),
            transform,
            space,
            prepared: Prepared::Vectors(Vec::new()),
            n_reference: 0,
            model: None,
        };
        let (prepared, n) = detector.prepare(Sample::Outputs(&reference_outputs), true)?;
        detector.prepared = prepared;
        detector.n_reference = n;
        Ok(detector)
    }

    pub fn kind(&self) -> DriftKind {
        self.kind
    }

    pub fn config(&self) -> &DriftConfig {
        &self.config
    }

    pub fn feature_space(&self) -> &[String] {
        &self.space
    }

    pub fn n_reference(&self) -> usize {
        self.n_reference
    }

    /// Map a sample into the test space as numeric vectors.
    fn vectors(&self, sample: Sample<'_>) -> Result<Vec<Vec<f64>>, DriftError> {
        let schema = self.reference.schema();
        let dense = |records: &[Record]| -> Vec<Vec<f64>> { records.iter().map(|r| dense_vector(r, schema)).collect() };
        let out = match (&self.transform, sample) {
            (Transform::Schema | Transform::Dense, Sample::Records(r)) => dense(r),
            (Transform::Schema | Transform::Dense, Sample::Outputs(o)) => o.to_vec(),
            (Transform::Project(p), Sample::Records(r)) => p.project_all(&dense(r))?,
            (Transform::Project(p), Sample::Outputs(o)) => p.project_all(o)?,
            (Transform::Model, Sample::Outputs(o)) => o.to_vec(),
            (Transform::Model, Sample::Records(r)) => match &self.model {
                Some(m) => m.predict(r)?,
                None => {
                    return Err(DriftError::Preprocessor(
                        "black-box reduction of records needs a model client".into(),
                    ))
                }
            },
        };
        if let Some(bad) = out.iter().find(|v| v.len() != self.space.len()) {
            return Err(DriftError::DimensionMismatch {
                expected: self.space.len(),
                got: bad.len(),
            });
        }
        Ok(out)
    }

    fn prepare(&self, sample: Sample<'_>, is_reference: bool) -> Result<(Prepared, usize), DriftError> {
        match self.config.method {
            DriftMethod::KsFeaturewise => {
                let columns = match (&self.transform, sample) {
                    (Transform::Schema, Sample::Records(records)) => self.schema_columns(records),
                    _ => {
                        let vectors = self.vectors(sample)?;
                        (0..self.space.len())
                            .map(|j| {
                                let mut col: Vec<f64> = vectors.iter().map(|v| v[j]).collect();
                                col.sort_by(f64::total_cmp);
                                Column::Numerical(col)
                            })
                            .collect()
                    }
                };
                Ok((Prepared::Featurewise(columns), sample.len()))
            }
            DriftMethod::Mmd => {
                let mut vectors = self.vectors(sample)?;
                if is_reference && vectors.len() > self.config.reference_cap {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                    let mut keep = rand::seq::index::sample(&mut rng, vectors.len(), self.config.reference_cap).into_vec();
                    keep.sort_unstable();
                    vectors = keep.into_iter().map(|i| vectors[i].clone()).collect();
                }
                let n = vectors.len();
                Ok((Prepared::Vectors(vectors), n))
            }
        }
    }

    fn schema_columns(&self, records: &[Record]) -> Vec<Column> {
        self.reference
            .schema()
            .features()
            .iter()
            .enumerate()
            .map(|(j, spec)| match &spec.kind {
                FeatureKind::Numerical => {
                    let mut col: Vec<f64> = records.iter().filter_map(|r| r.get(j).and_then(Value::as_f64)).collect();
                    col.sort_by(f64::total_cmp);
                    Column::Numerical(col)
                }
                FeatureKind::Categorical { categories } => {
                    let mut t = FrequencyTable::new(categories.iter().cloned());
                    for r in records {
                        if let Some(tok) = r.get(j).and_then(Value::as_token) {
                            t.update(tok).expect("validated record");
                        }
                    }
                    Column::Categorical(t)
                }
            })
            .collect()
    }

    /// Test one live batch against the reference.
    pub fn detect(&self, batch: Sample<'_>, window: u64, timestamp: TimestampMs) -> Result<DriftReport, DriftError> {
        if batch.len() < self.config.min_batch.max(1) {
            return Err(DriftError::InsufficientBatch {
                got: batch.len(),
                min: self.config.min_batch,
            });
        }
        let (test, n_test) = self.prepare(batch, false)?;
        let mut report = DriftReport {
            kind: self.kind,
            method: self.config.method,
            correction: self.config.correction,
            alpha: self.config.alpha,
            drift_detected: false,
            feature_space: self.space.clone(),
            features: Vec::new(),
            mmd: None,
            n_reference: self.n_reference,
            n_test,
            window,
            timestamp,
        };
        match (&self.prepared, test) {
            (Prepared::Featurewise(reference), Prepared::Featurewise(test)) => {
                let mut tests = Vec::with_capacity(reference.len());
                for (name, (r, t)) in self.space.iter().zip(reference.iter().zip(&test)) {
                    let (kind, statistic, p_value) = match (r, t) {
                        (Column::Numerical(r), Column::Numerical(t)) => {
                            let d = ks_statistic(r, t)?;
                            ("ks", d, ks_pvalue(d, r.len(), t.len()))
                        }
                        (Column::Categorical(r), Column::Categorical(t)) => match chi2_two_sample(r, t) {
                            Ok((s, p)) => ("chi2", s, p),
                            // A single observed category carries no evidence of a shift.
                            Err(DriftError::DegenerateTable) => ("chi2", 0.0, 1.0),
                            Err(e) => return Err(e),
                        },
                        _ => unreachable!("reference and test columns share a layout"),
                    };
                    tests.push(FeatureTest {
                        name: name.clone(),
                        test: kind.to_string(),
                        statistic,
                        p_value,
                        reject: false,
                    });
                }
                let pvalues: Vec<f64> = tests.iter().map(|t| t.p_value).collect();
                let decisions = self.config.correction.apply(&pvalues, self.config.alpha);
                for (t, reject) in tests.iter_mut().zip(decisions) {
                    t.reject = reject;
                }
                report.drift_detected = tests.iter().any(|t| t.reject);
                report.features = tests;
            }
            (Prepared::Vectors(reference), Prepared::Vectors(test)) => {
                let sigma2 = match self.config.bandwidth {
                    Some(s) => s,
                    None => {
                        let pooled: Vec<Vec<f64>> = reference.iter().chain(&test).cloned().collect();
                        median_heuristic(&pooled)?
                    }
                };
                let outcome = mmd_permutation_test(reference, &test, sigma2, self.config.n_permutations, self.config.seed)?;
                report.drift_detected = outcome.p_value <= self.config.alpha;
                report.mmd = Some(outcome);
            }
            _ => unreachable!("reference and test prepared with the same method"),
        }
        Ok(report)
    }
}

/// One-shot covariate drift test of `batch` against `reference`.
pub fn detect_drift(reference: &ReferenceSet, batch: &[Record], config: &DriftConfig) -> Result<DriftReport, DriftError> {
    DriftDetector::covariate(reference, config.clone(), None)?.detect(Sample::Records(batch), 0, 0)
}

/// Map records to the model's output vectors (black-box shift detection).
pub fn reduce_bbsd(records: &[Record], model: &dyn ModelClient) -> Result<Vec<Vec<f64>>, DriftError> {
    let outputs = model.predict(records)?;
    if outputs.len() != records.len() {
        return Err(DriftError::Model(ModelError::Malformed(format!(
            "{} outputs for {} records",
            outputs.len(),
            records.len()
        ))));
    }
    Ok(outputs)
}
