//! Black-box anchor explanations.
//!
//! The explainer only ever talks to the model through [`ModelClient`]. Each
//! candidate predicate pins one feature of the instance; precision is
//! estimated by resampling the free features from reference rows and
//! checking how often the model keeps its prediction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ModelClient, ModelError};
use crate::model::{argmax, FeatureKind, Record, ReferenceSet, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// lower < value ≤ upper; `None` bounds are infinite.
    InBin { lower: Option<f64>, upper: Option<f64> },
    Equals(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub feature: String,
    #[serde(skip)]
    index: usize,
    pub condition: Condition,
}

impl Predicate {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn holds(&self, record: &Record) -> bool {
        match (&self.condition, record.get(self.index)) {
            (Condition::InBin { lower, upper }, Some(Value::Num(x))) => {
                lower.is_none_or(|l| *x > l) && upper.is_none_or(|u| *x <= u)
            }
            (Condition::Equals(tok), Some(Value::Cat(t))) => tok == t,
            _ => false,
        }
    }
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// One candidate predicate per feature: the reference-quartile bin holding
/// the instance's value, or equality with its category token.
pub fn discretize(instance: &Record, reference: &ReferenceSet) -> Vec<Predicate> {
    reference
        .schema()
        .features()
        .iter()
        .enumerate()
        .map(|(index, spec)| {
            let condition = match (&spec.kind, instance.get(index)) {
                (FeatureKind::Numerical, Some(Value::Num(x))) => {
                    let mut col = reference.column(index);
                    col.sort_by(f64::total_cmp);
                    let mut cuts: Vec<f64> = if col.first() == col.last() {
                        Vec::new()
                    } else {
                        [0.25, 0.5, 0.75].iter().map(|&q| quantile_sorted(&col, q)).collect()
                    };
                    cuts.dedup();
                    let pos = cuts.partition_point(|&c| c < *x);
                    Condition::InBin {
                        lower: pos.checked_sub(1).map(|i| cuts[i]),
                        upper: cuts.get(pos).copied(),
                    }
                }
                (_, Some(Value::Cat(tok))) => Condition::Equals(tok.clone()),
                _ => unreachable!("instance validated against the reference schema"),
            };
            Predicate {
                feature: spec.name.clone(),
                index,
                condition,
            }
        })
        .collect()
}

/// Fraction of reference rows satisfying every predicate.
pub fn coverage(anchor: &[Predicate], reference: &ReferenceSet) -> f64 {
    let hits = reference
        .records()
        .iter()
        .filter(|r| anchor.iter().all(|p| p.holds(r)))
        .count();
    hits as f64 / reference.len() as f64
}

/// Class predicted by one output vector. Single-value outputs are read as a
/// class label.
pub fn predicted_class(output: &[f64]) -> Option<usize> {
    match output {
        [] => None,
        [v] if v.is_finite() && *v >= 0.0 => Some(v.round() as usize),
        [_] => None,
        many => argmax(many),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainerConfig {
    pub precision_target: f64,
    pub n_samples: usize,
    /// Maximum number of instances sent to the model per explanation.
    pub budget: usize,
    pub seed: u64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            precision_target: 0.95,
            n_samples: 200,
            budget: 20_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorExplanation {
    pub predicates: Vec<Predicate>,
    pub precision: f64,
    pub coverage: f64,
    pub predicted_class: usize,
    pub queries_used: usize,
    pub converged: bool,
    /// Perturbed samples behind the precision estimate.
    pub precision_samples: usize,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ExplainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("query budget exhausted before reaching the precision target")]
    BudgetExhausted(Box<AnchorExplanation>),
    #[error("budget of {budget} queries cannot cover a single evaluation of {needed}")]
    BudgetTooSmall { budget: usize, needed: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionEstimate {
    pub precision: f64,
    pub samples: usize,
}

/// Perturbations of `instance`: anchored features keep the instance's value,
/// every other feature is copied from an independently drawn reference row.
/// Row indices are drawn for every feature regardless of the anchor, so the
/// same seed yields the same draws for any anchor.
fn perturb(anchor: &[Predicate], instance: &Record, reference: &ReferenceSet, n_samples: usize, seed: u64) -> Vec<Record> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = reference.records();
    let d = instance.len();
    let mut anchored = vec![false; d];
    for p in anchor {
        anchored[p.index] = true;
    }
    (0..n_samples)
        .map(|_| {
            let mut sample = instance.clone();
            for (j, &fixed) in anchored.iter().enumerate() {
                let row = rng.random_range(0..rows.len());
                if !fixed {
                    sample.set_unchecked(j, rows[row].values()[j].clone());
                }
            }
            sample
        })
        .collect()
}

pub fn estimate_precision(
    anchor: &[Predicate],
    instance: &Record,
    target_class: usize,
    model: &dyn ModelClient,
    reference: &ReferenceSet,
    n_samples: usize,
    seed: u64,
) -> Result<PrecisionEstimate, ExplainError> {
    let samples = perturb(anchor, instance, reference, n_samples, seed);
    let outputs = model.predict(&samples)?;
    if outputs.len() != samples.len() {
        return Err(ModelError::Malformed(format!("{} outputs for {} instances", outputs.len(), samples.len())).into());
    }
    let kept = outputs.iter().filter(|o| predicted_class(o) == Some(target_class)).count();
    Ok(PrecisionEstimate {
        precision: if n_samples == 0 { 1.0 } else { kept as f64 / n_samples as f64 },
        samples: n_samples,
    })
}

/// Greedy forward selection: starting from the empty anchor, add the
/// candidate with the highest estimated precision (ties to the lower feature
/// index) until the target is met, candidates run out, or the query budget
/// cannot pay for another evaluation.
pub fn anchor_search(
    instance: &Record,
    model: &dyn ModelClient,
    reference: &ReferenceSet,
    config: &ExplainerConfig,
) -> Result<AnchorExplanation, ExplainError> {
    let n = config.n_samples;
    if config.budget < 1 + n {
        return Err(ExplainError::BudgetTooSmall {
            budget: config.budget,
            needed: 1 + n,
        });
    }
    let outputs = model.predict(std::slice::from_ref(instance))?;
    let target = outputs
        .first()
        .and_then(|o| predicted_class(o))
        .ok_or_else(|| ModelError::Malformed("no class in model output".into()))?;
    let mut queries = 1;

    let mut anchor: Vec<Predicate> = Vec::new();
    let mut remaining = discretize(instance, reference);
    let mut precision = estimate_precision(&anchor, instance, target, model, reference, n, config.seed)?.precision;
    queries += n;
    let mut exhausted = false;

    while precision < config.precision_target && !remaining.is_empty() && !exhausted {
        let mut best: Option<(usize, f64)> = None;
        for (i, candidate) in remaining.iter().enumerate() {
            if queries + n > config.budget {
                exhausted = true;
                break;
            }
            let mut trial = anchor.clone();
            trial.push(candidate.clone());
            let p = estimate_precision(&trial, instance, target, model, reference, n, config.seed)?.precision;
            queries += n;
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((i, p));
            }
        }
        match best {
            // A partially evaluated step only commits an improvement.
            Some((i, p)) if !exhausted || p > precision => {
                anchor.push(remaining.remove(i));
                precision = p;
            }
            _ => {}
        }
    }

    let explanation = AnchorExplanation {
        coverage: coverage(&anchor, reference),
        predicates: anchor,
        precision,
        predicted_class: target,
        queries_used: queries,
        converged: precision >= config.precision_target,
        precision_samples: n,
    };
    if exhausted && !explanation.converged {
        Err(ExplainError::BudgetExhausted(Box::new(explanation)))
    } else {
        Ok(explanation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::FnModel;
    use crate::model::{validate_record, FeatureSchema, FeatureSpec, RawValue};

    fn schema() -> FeatureSchema {
        FeatureSchema::new(vec![
            FeatureSpec::numerical("x0"),
            FeatureSpec::numerical("x1"),
            FeatureSpec::categorical("c", ["a", "b"]),
        ])
        .unwrap()
    }

    fn record(x0: f64, x1: f64, c: &str) -> Record {
        validate_record(&[RawValue::Number(x0), x1.into(), c.into()], &schema()).unwrap()
    }

    fn uniform_reference(n: usize, seed: u64) -> ReferenceSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records = (0..n)
            .map(|i| record(rng.random(), rng.random(), if i % 10 < 3 { "a" } else { "b" }))
            .collect();
        ReferenceSet::new(schema(), records).unwrap()
    }

    fn rule(r: &Record) -> Vec<f64> {
        let x0 = r.get(0).and_then(Value::as_f64).unwrap();
        if x0 > 0.5 {
            vec![0.0, 1.0]
        } else {
            vec![1.0, 0.0]
        }
    }

    #[test]
    fn quartile_bins() {
        let reference = uniform_reference(1000, 1);
        let mut col = reference.column(0);
        col.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&col, 0.25);
        let low = discretize(&record(-5.0, 0.5, "a"), &reference);
        assert_eq!(low[0].condition, Condition::InBin { lower: None, upper: Some(q1) });
        assert_eq!(low[2].condition, Condition::Equals("a".into()));
        let high = discretize(&record(5.0, 0.5, "a"), &reference);
        assert!(matches!(high[0].condition, Condition::InBin { upper: None, .. }));
        assert_eq!(low.len(), 3);
    }

    #[test]
    fn constant_feature_gets_unbounded_bin() {
        let records = (0..10).map(|i| record(1.0, i as f64, "a")).collect();
        let reference = ReferenceSet::new(schema(), records).unwrap();
        let preds = discretize(&record(1.0, 3.0, "b"), &reference);
        assert_eq!(preds[0].condition, Condition::InBin { lower: None, upper: None });
    }

    #[test]
    fn candidates_hold_for_instance() {
        let reference = uniform_reference(200, 2);
        for x in [0.0, 0.1, 0.3, 0.5, 0.77, 0.99] {
            let inst = record(x, 1.0 - x, "b");
            assert!(discretize(&inst, &reference).iter().all(|p| p.holds(&inst)));
        }
    }

    #[test]
    fn full_anchor_is_exact() {
        let reference = uniform_reference(500, 3);
        let inst = record(0.9, 0.2, "a");
        let all = discretize(&inst, &reference);
        let est = estimate_precision(&all, &inst, 1, &FnModel(rule), &reference, 300, 9).unwrap();
        assert_eq!(est.precision, 1.0);
        assert_eq!(est.samples, 300);
    }

    #[test]
    fn empty_anchor_precision_near_half() {
        let reference = uniform_reference(2000, 4);
        let inst = record(0.9, 0.2, "a");
        let est = estimate_precision(&[], &inst, 1, &FnModel(rule), &reference, 1000, 5).unwrap();
        assert!((est.precision - 0.5).abs() <= 0.05, "{}", est.precision);
    }

    #[test]
    fn rule_model_anchors_on_x0_only() {
        let reference = uniform_reference(1000, 5);
        let config = ExplainerConfig {
            n_samples: 1000,
            seed: 11,
            ..ExplainerConfig::default()
        };
        let exp = anchor_search(&record(0.9, 0.2, "b"), &FnModel(rule), &reference, &config).unwrap();
        assert_eq!(exp.predicates.len(), 1);
        assert_eq!(exp.predicates[0].feature, "x0");
        assert!(exp.precision >= 0.95);
        assert!(exp.converged);
        assert_eq!(exp.predicted_class, 1);
        assert!(exp.queries_used <= config.budget);
    }

    #[test]
    fn constant_model_needs_no_predicates() {
        let reference = uniform_reference(100, 6);
        let model = FnModel(|_: &Record| vec![0.2, 0.8]);
        let exp = anchor_search(&record(0.1, 0.2, "a"), &model, &reference, &ExplainerConfig::default()).unwrap();
        assert!(exp.predicates.is_empty());
        assert_eq!(exp.precision, 1.0);
        assert_eq!(exp.coverage, 1.0);
    }

    #[test]
    fn budget_of_one_evaluation() {
        let reference = uniform_reference(100, 7);
        let config = ExplainerConfig {
            budget: 201,
            ..ExplainerConfig::default()
        };
        match anchor_search(&record(0.9, 0.2, "a"), &FnModel(rule), &reference, &config) {
            Err(ExplainError::BudgetExhausted(partial)) => {
                assert!(!partial.converged);
                assert!(partial.predicates.is_empty());
                assert_eq!(partial.queries_used, 201);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn coverage_counts_rows() {
        let reference = uniform_reference(100, 8);
        assert_eq!(coverage(&[], &reference), 1.0);
        let eq_a = discretize(&record(0.5, 0.5, "a"), &reference).remove(2);
        assert!((coverage(&[eq_a], &reference) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn unavailable_model_propagates() {
        struct Down;
        impl ModelClient for Down {
            fn predict(&self, _: &[Record]) -> Result<Vec<Vec<f64>>, ModelError> {
                Err(ModelError::Unavailable("connection refused".into()))
            }
        }
        let reference = uniform_reference(20, 9);
        assert!(matches!(
            anchor_search(&record(0.5, 0.5, "a"), &Down, &reference, &ExplainerConfig::default()),
            Err(ExplainError::Model(ModelError::Unavailable(_)))
        ));
    }

    #[test]
    fn predicate_json_shape() {
        let p = Predicate {
            feature: "x0".into(),
            index: 0,
            condition: Condition::InBin { lower: Some(0.5), upper: None },
        };
        let json = serde_json::to_value(&p).unwrap();
        assert_eq!(json, serde_json::json!({"feature": "x0", "condition": {"in_bin": {"lower": 0.5, "upper": null}}}));
    }
}
