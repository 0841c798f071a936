//! Bounded request-id → prediction map for joining delayed feedback.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;

use modelwatch_core::model::PredictionEvent;

/// Evicts in insertion order once `capacity` is reached.
#[derive(Debug)]
pub struct RequestLedger {
    capacity: usize,
    inner: Mutex<Inner>,
}

#[derive(Debug, Default)]
struct Inner {
    entries: HashMap<String, PredictionEvent>,
    order: VecDeque<String>,
}

impl RequestLedger {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ledger capacity must be positive");
        Self {
            capacity,
            inner: Mutex::new(Inner::default()),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, event: PredictionEvent) {
        let mut inner = self.inner.lock().unwrap();
        let id = event.request_id.clone();
        if inner.entries.insert(id.clone(), event).is_none() {
            inner.order.push_back(id);
        }
        while inner.entries.len() > self.capacity {
            match inner.order.pop_front() {
                Some(old) => {
                    inner.entries.remove(&old);
                }
                None => break,
            }
        }
    }

    pub fn get(&self, request_id: &str) -> Option<PredictionEvent> {
        self.inner.lock().unwrap().entries.get(request_id).cloned()
    }
}
