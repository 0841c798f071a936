//! Instance-level outlier scoring.
//!
//! [`MahalanobisState`] is the online detector: its mean and covariance are
//! updated with every scored instance. [`KnnDetector`] is the offline one:
//! fitted once on the reference set and immutable afterwards. Both are
//! calibrated against leave-self-out reference scores.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FeatureKind, Record, ReferenceSet, Value};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum OutlierError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("detector needs at least {needed} observations, has {have}")]
    NotReady { needed: u64, have: u64 },
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("reference of {size} points is too small for k = {k}")]
    InsufficientReference { size: usize, k: usize },
    #[error("no scores to calibrate on")]
    EmptyScores,
    #[error("percentile {0} outside (0, 1)")]
    InvalidPercentile(f64),
    #[error("schema has no usable features for this detector")]
    NoFeatures,
}

pub const DEFAULT_EPSILON_SCALE: f64 = 1e-6;
pub const DEFAULT_PERCENTILE: f64 = 0.99;

/// Running mean and co-moment matrix of a vector stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MahalanobisState {
    dim: usize,
    count: u64,
    mean: Vec<f64>,
    /// Σ (x−mean)(x−mean)ᵀ, row-major.
    comoment: Vec<f64>,
    /// Regularization is epsilon_scale · trace(Σ) / d.
    epsilon_scale: f64,
}

impl MahalanobisState {
    pub fn new(dim: usize, epsilon_scale: f64) -> Self {
        Self {
            dim,
            count: 0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
            epsilon_scale,
        }
    }

    /// State with known moments, e.g. restored from a snapshot.
    pub fn from_moments(count: u64, mean: Vec<f64>, covariance: &[f64], epsilon_scale: f64) -> Result<Self, OutlierError> {
        let dim = mean.len();
        if covariance.len() != dim * dim {
            return Err(OutlierError::DimensionMismatch {
                expected: dim * dim,
                got: covariance.len(),
            });
        }
        let scale = count.saturating_sub(1) as f64;
        Ok(Self {
            dim,
            count,
            mean,
            comoment: covariance.iter().map(|c| c * scale).collect(),
            epsilon_scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    fn check(&self, x: &[f64]) -> Result<(), OutlierError> {
        if x.len() == self.dim {
            Ok(())
        } else {
            Err(OutlierError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            })
        }
    }

    pub fn update(&mut self, x: &[f64]) -> Result<(), OutlierError> {
        self.check(x)?;
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n;
        }
        // (n−1)/n · δδᵀ keeps the co-moment exactly symmetric.
        let w = (n - 1.0) / n;
        for i in 0..self.dim {
            for j in 0..self.dim {
                self.comoment[i * self.dim + j] += w * delta[i] * delta[j];
            }
        }
        Ok(())
    }

    /// Inverse of [`update`](Self::update): the state without observation `x`.
    pub fn remove(&mut self, x: &[f64]) -> Result<(), OutlierError> {
        self.check(x)?;
        if self.count == 0 {
            return Err(OutlierError::NotReady { needed: 1, have: 0 });
        }
        let n = self.count as f64;
        self.count -= 1;
        if self.count == 0 {
            *self = Self::new(self.dim, self.epsilon_scale);
            return Ok(());
        }
        let old_mean: Vec<f64> = self
            .mean
            .iter()
            .zip(x)
            .map(|(m, a)| (n * m - a) / (n - 1.0))
            .collect();
        let delta: Vec<f64> = x.iter().zip(&old_mean).map(|(a, m)| a - m).collect();
        let w = (n - 1.0) / n;
        for i in 0..self.dim {
            for j in 0..self.dim {
                self.comoment[i * self.dim + j] -= w * delta[i] * delta[j];
            }
        }
        self.mean = old_mean;
        Ok(())
    }

    /// Sample covariance (divisor n−1), row-major.
    pub fn covariance(&self) -> Option<Vec<f64>> {
        (self.count >= 2).then(|| {
            let s = (self.count - 1) as f64;
            self.comoment.iter().map(|c| c / s).collect()
        })
    }

    /// Scoring is gated until the covariance has at least d+2 observations.
    pub fn ready(&self) -> bool {
        self.count >= self.dim as u64 + 2
    }

    pub fn score(&self, x: &[f64]) -> Result<f64, OutlierError> {
        self.check(x)?;
        if !self.ready() {
            return Err(OutlierError::NotReady {
                needed: self.dim as u64 + 2,
                have: self.count,
            });
        }
        let cov = self.covariance().expect("ready implies count >= 2");
        let trace: f64 = (0..self.dim).map(|i| cov[i * self.dim + i]).sum();
        let eps = self.epsilon_scale * trace / self.dim as f64;
        let mut sigma = DMatrix::from_row_slice(self.dim, self.dim, &cov);
        for i in 0..self.dim {
            sigma[(i, i)] += eps;
        }
        let chol = sigma.cholesky().ok_or(OutlierError::NotPositiveDefinite)?;
        let diff = DVector::from_iterator(self.dim, x.iter().zip(&self.mean).map(|(a, m)| a - m));
        // ‖L⁻¹(x−μ)‖ without forming the inverse.
        let z = chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .ok_or(OutlierError::NotPositiveDefinite)?;
        Ok(z.norm())
    }

    /// Leave-self-out scores of `points` against the state they built.
    pub fn reference_scores(&self, points: &[Vec<f64>]) -> Result<Vec<f64>, OutlierError> {
        points
            .iter()
            .map(|p| {
                let mut without = self.clone();
                without.remove(p)?;
                without.score(p)
            })
            .collect()
    }
}

/// Numerical feature vector of a record, used by the Mahalanobis detector.
pub fn numerical_vector(record: &Record) -> Vec<f64> {
    record.numerical_values()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum EncodedFeature {
    /// z-scored with reference mean and standard deviation.
    Numerical { index: usize, mean: f64, std: f64 },
    OneHot { index: usize, categories: Vec<String> },
}

/// Exact k-nearest-neighbour distance detector over a frozen, standardized
/// reference set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnDetector {
    k: usize,
    encoding: Vec<EncodedFeature>,
    dim: usize,
    points: Vec<Vec<f64>>,
}

impl KnnDetector {
    /// Numerical features with zero reference variance are dropped.
    pub fn fit(reference: &ReferenceSet, k: usize) -> Result<Self, OutlierError> {
        let size = reference.len();
        if k == 0 || k >= size {
            return Err(OutlierError::InsufficientReference { size, k });
        }
        let mut encoding = Vec::new();
        for (index, spec) in reference.schema().features().iter().enumerate() {
            match &spec.kind {
                FeatureKind::Numerical => {
                    let col = reference.column(index);
                    let n = col.len() as f64;
                    let mean = col.iter().sum::<f64>() / n;
                    let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
                    if var > 0.0 {
                        encoding.push(EncodedFeature::Numerical {
                            index,
                            mean,
                            std: var.sqrt(),
                        });
                    }
                }
                FeatureKind::Categorical { categories } => encoding.push(EncodedFeature::OneHot {
                    index,
                    categories: categories.clone(),
                }),
            }
        }
        let dim = encoding
            .iter()
            .map(|e| match e {
                EncodedFeature::Numerical { .. } => 1,
                EncodedFeature::OneHot { categories, .. } => categories.len(),
            })
            .sum();
        if dim == 0 {
            return Err(OutlierError::NoFeatures);
        }
        let mut detector = Self {
            k,
            encoding,
            dim,
            points: Vec::with_capacity(size),
        };
        detector.points = reference.records().iter().map(|r| detector.encode(r)).collect::<Result<_, _>>()?;
        Ok(detector)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encode(&self, record: &Record) -> Result<Vec<f64>, OutlierError> {
        let mut out = Vec::with_capacity(self.dim);
        for e in &self.encoding {
            match e {
                EncodedFeature::Numerical { index, mean, std } => match record.get(*index) {
                    Some(Value::Num(x)) => out.push((x - mean) / std),
                    _ => return Err(OutlierError::DimensionMismatch { expected: self.dim, got: record.len() }),
                },
                EncodedFeature::OneHot { index, categories } => match record.get(*index) {
                    Some(Value::Cat(tok)) => out.extend(categories.iter().map(|c| if c == tok { 1.0 } else { 0.0 })),
                    _ => return Err(OutlierError::DimensionMismatch { expected: self.dim, got: record.len() }),
                },
            }
        }
        Ok(out)
    }

    pub fn score(&self, record: &Record) -> Result<f64, OutlierError> {
        let x = self.encode(record)?;
        Ok(self.score_encoded(&x, None))
    }

    /// Mean distance to the k nearest reference points, optionally skipping
    /// one reference index.
    fn score_encoded(&self, x: &[f64], skip: Option<usize>) -> f64 {
        let mut d: Vec<f64> = self
            .points
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(_, p)| p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect();
        let k = self.k.min(d.len());
        d.select_nth_unstable_by(k - 1, f64::total_cmp);
        let mut nearest = d[..k].to_vec();
        nearest.sort_by(f64::total_cmp);
        nearest.iter().sum::<f64>() / k as f64
    }

    /// Leave-self-out score of every reference point.
    pub fn reference_scores(&self) -> Vec<f64> {
        (0..self.points.len())
            .map(|i| self.score_encoded(&self.points[i], Some(i)))
            .collect()
    }
}

/// Empirical q-quantile with linear interpolation at 1-based position
/// (n−1)·q + 1.
pub fn calibrate_threshold(scores: &[f64], q: f64) -> Result<f64, OutlierError> {
    if scores.is_empty() {
        return Err(OutlierError::EmptyScores);
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(OutlierError::InvalidPercentile(q));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierVerdict {
    pub request_id: String,
    pub detector: String,
    pub score: f64,
    pub threshold: f64,
    pub is_outlier: bool,
}

impl OutlierVerdict {
    pub fn new(request_id: impl Into<String>, detector: impl Into<String>, score: f64, threshold: f64) -> Self {
        Self {
            request_id: request_id.into(),
            detector: detector.into(),
            score,
            threshold,
            is_outlier: score > threshold,
        }
    }
}
