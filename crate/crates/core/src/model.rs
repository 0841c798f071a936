//! Feature schemas, records and the events that flow between the gateway and
//! the analysis components.

use std::collections::HashSet;
use std::fmt;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Milliseconds since the Unix epoch, UTC.
pub type TimestampMs = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Numerical,
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn numerical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Numerical,
        }
    }

    pub fn categorical<S: Into<String>>(
        name: impl Into<String>,
        categories: impl IntoIterator<Item = S>,
    ) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical {
                categories: categories.into_iter().map(Into::into).collect(),
            },
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self.kind, FeatureKind::Numerical)
    }

    pub fn categories(&self) -> Option<&[String]> {
        match &self.kind {
            FeatureKind::Categorical { categories } => Some(categories),
            FeatureKind::Numerical => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("schema has no features")]
    Empty,
    #[error("duplicate feature name `{0}`")]
    DuplicateName(String),
    #[error("categorical feature `{0}` declares no categories")]
    NoCategories(String),
    #[error("categorical feature `{feature}` declares category `{token}` twice")]
    DuplicateCategory { feature: String, token: String },
}

/// Ordered feature list. The order is the canonical vector order used by
/// every component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FeatureSchema {
    features: Vec<FeatureSpec>,
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self, SchemaError> {
        if features.is_empty() {
            return Err(SchemaError::Empty);
        }
        let mut names = HashSet::new();
        for f in &features {
            if !names.insert(f.name.as_str()) {
                return Err(SchemaError::DuplicateName(f.name.clone()));
            }
            if let Some(cats) = f.categories() {
                if cats.is_empty() {
                    return Err(SchemaError::NoCategories(f.name.clone()));
                }
                let mut seen = HashSet::new();
                for c in cats {
                    if !seen.insert(c.as_str()) {
                        return Err(SchemaError::DuplicateCategory {
                            feature: f.name.clone(),
                            token: c.clone(),
                        });
                    }
                }
            }
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Indices of the numerical features, in schema order.
    pub fn numerical_indices(&self) -> Vec<usize> {
        self.features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_numerical())
            .map(|(i, _)| i)
            .collect()
    }
}

impl<'de> Deserialize<'de> for FeatureSchema {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            features: Vec<FeatureSpec>,
        }
        let raw = Raw::deserialize(deserializer)?;
        FeatureSchema::new(raw.features).map_err(serde::de::Error::custom)
    }
}

/// A single validated feature value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Num(f64),
    Cat(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Num(x) => Some(*x),
            Value::Cat(_) => None,
        }
    }

    pub fn as_token(&self) -> Option<&str> {
        match self {
            Value::Cat(t) => Some(t),
            Value::Num(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(x) => write!(f, "{x}"),
            Value::Cat(t) => f.write_str(t),
        }
    }
}

/// Unvalidated input as it arrives from JSON bodies or CSV cells.
#[derive(Debug, Clone, PartialEq)]
pub enum RawValue {
    Number(f64),
    Text(String),
    Other(String),
}

impl From<&serde_json::Value> for RawValue {
    fn from(v: &serde_json::Value) -> Self {
        match v {
            serde_json::Value::Number(n) => n
                .as_f64()
                .map(RawValue::Number)
                .unwrap_or_else(|| RawValue::Other(n.to_string())),
            serde_json::Value::String(s) => RawValue::Text(s.clone()),
            other => RawValue::Other(other.to_string()),
        }
    }
}

impl From<f64> for RawValue {
    fn from(x: f64) -> Self {
        RawValue::Number(x)
    }
}

impl From<&str> for RawValue {
    fn from(s: &str) -> Self {
        RawValue::Text(s.to_string())
    }
}

impl From<&Value> for RawValue {
    fn from(v: &Value) -> Self {
        match v {
            Value::Num(x) => RawValue::Number(*x),
            Value::Cat(t) => RawValue::Text(t.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    WrongArity { expected: usize, got: usize },
    UnknownCategory { feature: String, token: String },
    NonFiniteNumber { feature: String },
    TypeMismatch { feature: String, found: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::WrongArity { expected, got } => {
                write!(f, "expected {expected} values, got {got}")
            }
            Violation::UnknownCategory { feature, token } => {
                write!(f, "feature `{feature}`: unknown category `{token}`")
            }
            Violation::NonFiniteNumber { feature } => {
                write!(f, "feature `{feature}`: value is not a finite number")
            }
            Violation::TypeMismatch { feature, found } => {
                write!(f, "feature `{feature}`: unexpected value `{found}`")
            }
        }
    }
}

/// Every violation found in one raw record.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ValidationError {
    pub violations: Vec<Violation>,
}

impl ValidationError {
    pub fn has_wrong_arity(&self) -> bool {
        self.violations
            .iter()
            .any(|v| matches!(v, Violation::WrongArity { .. }))
    }
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

/// A feature vector validated against a schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Record {
    values: Vec<Value>,
}

impl Record {
    pub fn values(&self) -> &[Value] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Value> {
        self.values.get(index)
    }

    /// Values of the numerical features, in schema order.
    pub fn numerical_values(&self) -> Vec<f64> {
        self.values.iter().filter_map(Value::as_f64).collect()
    }

    /// Replace one value without re-validating. Callers must keep the record
    /// consistent with its schema.
    pub(crate) fn set_unchecked(&mut self, index: usize, value: Value) {
        self.values[index] = value;
    }

    /// Raw values suitable for sending to an upstream model.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.values).expect("record values always serialize")
    }
}

pub fn validate_record(raw: &[RawValue], schema: &FeatureSchema) -> Result<Record, ValidationError> {
    if raw.len() != schema.len() {
        return Err(ValidationError {
            violations: vec![Violation::WrongArity {
                expected: schema.len(),
                got: raw.len(),
            }],
        });
    }
    let mut values = Vec::with_capacity(raw.len());
    let mut violations = Vec::new();
    for (spec, raw) in schema.features().iter().zip(raw) {
        match (&spec.kind, raw) {
            (FeatureKind::Numerical, RawValue::Number(x)) => {
                if x.is_finite() {
                    values.push(Value::Num(*x));
                } else {
                    violations.push(Violation::NonFiniteNumber {
                        feature: spec.name.clone(),
                    });
                }
            }
            (FeatureKind::Numerical, RawValue::Text(s)) => match s.trim().parse::<f64>() {
                Ok(x) if x.is_finite() => values.push(Value::Num(x)),
                Ok(_) => violations.push(Violation::NonFiniteNumber {
                    feature: spec.name.clone(),
                }),
                Err(_) => violations.push(Violation::TypeMismatch {
                    feature: spec.name.clone(),
                    found: s.clone(),
                }),
            },
            (FeatureKind::Categorical { categories }, RawValue::Text(s)) => {
                if categories.iter().any(|c| c == s) {
                    values.push(Value::Cat(s.clone()));
                } else {
                    violations.push(Violation::UnknownCategory {
                        feature: spec.name.clone(),
                        token: s.clone(),
                    });
                }
            }
            (FeatureKind::Categorical { .. }, RawValue::Number(x)) => {
                violations.push(Violation::TypeMismatch {
                    feature: spec.name.clone(),
                    found: x.to_string(),
                })
            }
            (_, RawValue::Other(s)) => violations.push(Violation::TypeMismatch {
                feature: spec.name.clone(),
                found: s.clone(),
            }),
        }
    }
    if violations.is_empty() {
        Ok(Record { values })
    } else {
        Err(ValidationError { violations })
    }
}

/// Validate a JSON array of feature values.
pub fn validate_json(raw: &serde_json::Value, schema: &FeatureSchema) -> Result<Record, ValidationError> {
    match raw.as_array() {
        Some(items) => {
            let raw: Vec<RawValue> = items.iter().map(RawValue::from).collect();
            validate_record(&raw, schema)
        }
        None => Err(ValidationError {
            violations: vec![Violation::TypeMismatch {
                feature: "<instance>".into(),
                found: raw.to_string(),
            }],
        }),
    }
}

/// Dense numeric encoding: numerical values as-is, categoricals one-hot in
/// declared category order.
pub fn dense_vector(record: &Record, schema: &FeatureSchema) -> Vec<f64> {
    let mut out = Vec::with_capacity(schema.len());
    for (spec, value) in schema.features().iter().zip(record.values()) {
        match (&spec.kind, value) {
            (FeatureKind::Numerical, Value::Num(x)) => out.push(*x),
            (FeatureKind::Categorical { categories }, Value::Cat(tok)) => {
                out.extend(categories.iter().map(|c| if c == tok { 1.0 } else { 0.0 }))
            }
            _ => unreachable!("record does not match schema"),
        }
    }
    out
}

/// Names of the dimensions produced by [`dense_vector`].
pub fn dense_names(schema: &FeatureSchema) -> Vec<String> {
    let mut out = Vec::new();
    for spec in schema.features() {
        match &spec.kind {
            FeatureKind::Numerical => out.push(spec.name.clone()),
            FeatureKind::Categorical { categories } => {
                out.extend(categories.iter().map(|c| format!("{}={}", spec.name, c)))
            }
        }
    }
    out
}

/// Class or real-valued target, as carried by predictions and feedback.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(u64),
    Value(f64),
}

impl Target {
    pub fn as_real(&self) -> f64 {
        match self {
            Target::Class(c) => *c as f64,
            Target::Value(v) => *v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEvent {
    pub request_id: String,
    pub timestamp: TimestampMs,
    pub record: Record,
    pub model_output: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_label: Option<usize>,
}

impl PredictionEvent {
    /// The prediction as a feedback target: the class label when present,
    /// otherwise the first output value.
    pub fn predicted_target(&self) -> Option<Target> {
        match self.predicted_label {
            Some(c) => Some(Target::Class(c as u64)),
            None => self.model_output.first().map(|v| Target::Value(*v)),
        }
    }
}

/// Index of the largest output. Ties resolve to the lowest index.
pub fn argmax(output: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in output.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// True when `output` is a probability vector: non-negative entries summing
/// to one within 1e-6.
pub fn is_probability_vector(output: &[f64]) -> bool {
    !output.is_empty()
        && output.iter().all(|&p| p >= 0.0 && p.is_finite())
        && (output.iter().sum::<f64>() - 1.0).abs() <= 1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<Record>,
    pub predicted: Target,
    pub truth: Target,
    pub timestamp: TimestampMs,
}

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("header mismatch: expected [{expected}], found [{found}]")]
    HeaderMismatch { expected: String, found: String },
    #[error("row {row}: {error}")]
    Row { row: usize, error: ValidationError },
    #[error("reference set is empty")]
    Empty,
    #[error("model outputs given for {outputs} of {records} records")]
    OutputCount { records: usize, outputs: usize },
}

/// Sample of the training distribution that live traffic is compared against.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    schema: FeatureSchema,
    records: Vec<Record>,
    model_outputs: Option<Vec<Vec<f64>>>,
}

impl ReferenceSet {
    /// Records are assumed to be validated against `schema`.
    pub fn new(schema: FeatureSchema, records: Vec<Record>) -> Result<Self, ReferenceError> {
        if records.is_empty() {
            return Err(ReferenceError::Empty);
        }
        for (row, r) in records.iter().enumerate() {
            let raw: Vec<RawValue> = r.values().iter().map(RawValue::from).collect();
            validate_record(&raw, &schema).map_err(|error| ReferenceError::Row { row, error })?;
        }
        Ok(Self {
            schema,
            records,
            model_outputs: None,
        })
    }

    pub fn with_model_outputs(mut self, outputs: Vec<Vec<f64>>) -> Result<Self, ReferenceError> {
        if outputs.len() != self.records.len() {
            return Err(ReferenceError::OutputCount {
                records: self.records.len(),
                outputs: outputs.len(),
            });
        }
        self.model_outputs = Some(outputs);
        Ok(self)
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn model_outputs(&self) -> Option<&[Vec<f64>]> {
        self.model_outputs.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Column of a numerical feature.
    pub fn column(&self, index: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| r.get(index).and_then(Value::as_f64))
            .collect()
    }
}

pub fn load_reference_set(path: &Path, schema: &FeatureSchema) -> Result<ReferenceSet, ReferenceError> {
    let file = std::fs::File::open(path).map_err(|source| ReferenceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_reference_csv(file, schema)
}

pub fn read_reference_csv<R: io::Read>(reader: R, schema: &FeatureSchema) -> Result<ReferenceSet, ReferenceError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let expected: Vec<&str> = schema.names().collect();
    if header.len() != expected.len() || header.iter().zip(&expected).any(|(h, e)| h != e) {
        return Err(ReferenceError::HeaderMismatch {
            expected: expected.join(","),
            found: header.join(","),
        });
    }
    let mut records = Vec::new();
    for (row, result) in rdr.records().enumerate() {
        let row_data = result?;
        let raw: Vec<RawValue> = row_data.iter().map(RawValue::from).collect();
        let record = validate_record(&raw, schema).map_err(|error| ReferenceError::Row { row, error })?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(ReferenceError::Empty);
    }
    Ok(ReferenceSet {
        schema: schema.clone(),
        records,
        model_outputs: None,
    })
}

/// Write records as CSV with a header row of feature names.
pub fn write_csv<W: io::Write>(writer: W, schema: &FeatureSchema, records: &[Record]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(schema.names())?;
    for r in records {
        wtr.write_record(r.values().iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}
