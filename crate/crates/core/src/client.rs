//! Black-box access to a prediction model.

use thiserror::Error;

use crate::model::Record;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("model unavailable: {0}")]
    Unavailable(String),
    #[error("model timed out: {0}")]
    Timeout(String),
    #[error("malformed model response: {0}")]
    Malformed(String),
}

/// Anything that maps instances to output vectors (class probabilities, or a
/// single regression value). Implementations must return exactly one output
/// per instance, in order.
pub trait ModelClient: Send + Sync {
    fn predict(&self, instances: &[Record]) -> Result<Vec<Vec<f64>>, ModelError>;
}

impl<M: ModelClient + ?Sized> ModelClient for &M {
    fn predict(&self, instances: &[Record]) -> Result<Vec<Vec<f64>>, ModelError> {
        (**self).predict(instances)
    }
}

impl<M: ModelClient + ?Sized> ModelClient for std::sync::Arc<M> {
    fn predict(&self, instances: &[Record]) -> Result<Vec<Vec<f64>>, ModelError> {
        (**self).predict(instances)
    }
}

/// In-process model backed by a closure over a single record.
pub struct FnModel<F>(pub F);

impl<F> ModelClient for FnModel<F>
where
    F: Fn(&Record) -> Vec<f64> + Send + Sync,
{
    fn predict(&self, instances: &[Record]) -> Result<Vec<Vec<f64>>, ModelError> {
        Ok(instances.iter().map(&self.0).collect())
    }
}
