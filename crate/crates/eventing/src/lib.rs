//! In-process event broker.
//!
//! Publishers enqueue and return; every trigger owns a bounded queue and a
//! worker thread that feeds its handler serially. Full queues drop their
//! oldest entry. [`Broker::drain`] is the one synchronization point.

mod sink;

pub use sink::{chain_sink, Sink};

use std::collections::VecDeque;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: String,
    pub topic: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub timestamp: u64,
    pub payload: serde_json::Value,
}

impl Event {
    /// An event without an id; the broker assigns one on publish.
    pub fn new(topic: impl Into<String>, kind: impl Into<String>, payload: serde_json::Value, timestamp: u64) -> Self {
        Self {
            id: String::new(),
            topic: topic.into(),
            kind: kind.into(),
            timestamp,
            payload,
        }
    }
}

/// Match on topic and/or type; an empty filter matches everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Filter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(default, rename = "type", skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
}

impl Filter {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn topic(topic: impl Into<String>) -> Self {
        Self {
            topic: Some(topic.into()),
            kind: None,
        }
    }

    pub fn kind(kind: impl Into<String>) -> Self {
        Self {
            topic: None,
            kind: Some(kind.into()),
        }
    }

    pub fn matches(&self, event: &Event) -> bool {
        self.topic.as_ref().is_none_or(|t| *t == event.topic) && self.kind.as_ref().is_none_or(|k| *k == event.kind)
    }
}

impl fmt::Display for Filter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "topic={} type={}",
            self.topic.as_deref().unwrap_or("*"),
            self.kind.as_deref().unwrap_or("*")
        )
    }
}

pub type HandlerError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TriggerId(pub u64);

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("broker stopped")]
    Stopped,
    #[error("queue capacity must be at least 1")]
    ZeroCapacity,
    #[error("drain timed out with work outstanding")]
    DrainTimeout(DrainStats),
    #[error("failed to spawn trigger worker: {0}")]
    Spawn(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerStats {
    pub id: TriggerId,
    pub name: String,
    pub filter: Filter,
    pub capacity: usize,
    pub matched: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub handler_errors: u64,
    pub queued: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrainStats {
    pub published: u64,
    pub triggers: Vec<TriggerStats>,
}

impl DrainStats {
    pub fn trigger(&self, id: TriggerId) -> Option<&TriggerStats> {
        self.triggers.iter().find(|t| t.id == id)
    }

    pub fn dropped(&self) -> u64 {
        self.triggers.iter().map(|t| t.dropped).sum()
    }
}

struct Queue {
    events: VecDeque<Arc<Event>>,
    busy: bool,
    closed: bool,
}

struct Slot {
    id: TriggerId,
    name: String,
    filter: Filter,
    capacity: usize,
    queue: Mutex<Queue>,
    ready: Condvar,
    idle: Condvar,
    matched: AtomicU64,
    delivered: AtomicU64,
    dropped: AtomicU64,
    handler_errors: AtomicU64,
}

impl Slot {
    fn stats(&self) -> TriggerStats {
        let queued = self.queue.lock().unwrap().events.len();
        TriggerStats {
            id: self.id,
            name: self.name.clone(),
            filter: self.filter.clone(),
            capacity: self.capacity,
            matched: self.matched.load(Ordering::SeqCst),
            delivered: self.delivered.load(Ordering::SeqCst),
            dropped: self.dropped.load(Ordering::SeqCst),
            handler_errors: self.handler_errors.load(Ordering::SeqCst),
            queued,
        }
    }

    fn close(&self) {
        self.queue.lock().unwrap().closed = true;
        self.ready.notify_all();
        self.idle.notify_all();
    }

    fn run(&self, mut handler: Box<dyn FnMut(&Event) -> Result<(), HandlerError> + Send>) {
        loop {
            let event = {
                let mut q = self.queue.lock().unwrap();
                loop {
                    if let Some(e) = q.events.pop_front() {
                        q.busy = true;
                        break e;
                    }
                    if q.closed {
                        return;
                    }
                    q = self.ready.wait(q).unwrap();
                }
            };
            let outcome = catch_unwind(AssertUnwindSafe(|| handler(&event)));
            self.delivered.fetch_add(1, Ordering::SeqCst);
            match outcome {
                Ok(Ok(())) => {}
                Ok(Err(e)) => {
                    self.handler_errors.fetch_add(1, Ordering::SeqCst);
                    tracing::warn!(trigger = %self.name, event = %event.id, error = %e, "handler failed");
                }
                Err(_) => {
                    self.handler_errors.fetch_add(1, Ordering::SeqCst);
                    tracing::error!(trigger = %self.name, event = %event.id, "handler panicked");
                }
            }
            let mut q = self.queue.lock().unwrap();
            q.busy = false;
            if q.events.is_empty() {
                self.idle.notify_all();
            }
        }
    }
}

struct Inner {
    running: AtomicBool,
    next_event: AtomicU64,
    next_trigger: AtomicU64,
    published: AtomicU64,
    // Serializes fan-out so every trigger sees one global publish order.
    order: Mutex<()>,
    slots: RwLock<Vec<Arc<Slot>>>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl Drop for Inner {
    fn drop(&mut self) {
        for slot in self.slots.get_mut().unwrap().iter() {
            slot.close();
        }
    }
}

/// Cheaply cloneable handle; all clones share one broker.
#[derive(Clone)]
pub struct Broker {
    inner: Arc<Inner>,
}

impl Default for Broker {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Broker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Broker")
            .field("running", &self.is_running())
            .field("published", &self.published())
            .finish()
    }
}

impl Broker {
    pub fn new() -> Self {
        Self {
            inner: Arc::new(Inner {
                running: AtomicBool::new(true),
                next_event: AtomicU64::new(0),
                next_trigger: AtomicU64::new(0),
                published: AtomicU64::new(0),
                order: Mutex::new(()),
                slots: RwLock::new(Vec::new()),
                workers: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn is_running(&self) -> bool {
        self.inner.running.load(Ordering::SeqCst)
    }

    pub fn published(&self) -> u64 {
        self.inner.published.load(Ordering::SeqCst)
    }

    /// Enqueue on every matching trigger and return the event id. Never
    /// waits for a handler.
    pub fn publish(&self, mut event: Event) -> Result<String, BrokerError> {
        if !self.is_running() {
            return Err(BrokerError::Stopped);
        }
        if event.id.is_empty() {
            let seq = self.inner.next_event.fetch_add(1, Ordering::SeqCst);
            event.id = format!("evt-{seq:016x}");
        }
        let id = event.id.clone();
        let event = Arc::new(event);
        let _order = self.inner.order.lock().unwrap();
        let slots = self.inner.slots.read().unwrap();
        for slot in slots.iter().filter(|s| s.filter.matches(&event)) {
            slot.matched.fetch_add(1, Ordering::SeqCst);
            let mut q = slot.queue.lock().unwrap();
            if q.events.len() >= slot.capacity {
                q.events.pop_front();
                slot.dropped.fetch_add(1, Ordering::SeqCst);
            }
            q.events.push_back(Arc::clone(&event));
            drop(q);
            slot.ready.notify_one();
        }
        // Counted after enqueue so a concurrent drain cannot miss the event.
        self.inner.published.fetch_add(1, Ordering::SeqCst);
        Ok(id)
    }

    pub fn register_trigger<F>(
        &self,
        name: impl Into<String>,
        filter: Filter,
        capacity: usize,
        handler: F,
    ) -> Result<TriggerId, BrokerError>
    where
        F: FnMut(&Event) -> Result<(), HandlerError> + Send + 'static,
    {
        if !self.is_running() {
            return Err(BrokerError::Stopped);
        }
        if capacity == 0 {
            return Err(BrokerError::ZeroCapacity);
        }
        let id = TriggerId(self.inner.next_trigger.fetch_add(1, Ordering::SeqCst));
        let name = name.into();
        let slot = Arc::new(Slot {
            id,
            name: name.clone(),
            filter,
            capacity,
            queue: Mutex::new(Queue {
                events: VecDeque::new(),
                busy: false,
                closed: false,
            }),
            ready: Condvar::new(),
            idle: Condvar::new(),
            matched: AtomicU64::new(0),
            delivered: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
            handler_errors: AtomicU64::new(0),
        });
        let worker = Arc::clone(&slot);
        let handle = thread::Builder::new()
            .name(format!("trigger-{name}"))
            .spawn(move || worker.run(Box::new(handler)))?;
        self.inner.slots.write().unwrap().push(slot);
        self.inner.workers.lock().unwrap().push(handle);
        Ok(id)
    }

    pub fn stats(&self) -> DrainStats {
        let slots = self.inner.slots.read().unwrap();
        DrainStats {
            published: self.published(),
            triggers: slots.iter().map(|s| s.stats()).collect(),
        }
    }

    /// Wait until every queue is empty and every handler idle, including
    /// events published by handlers while draining.
    pub fn drain(&self, timeout: Duration) -> Result<DrainStats, BrokerError> {
        let deadline = Instant::now() + timeout;
        loop {
            let before = self.published();
            let slots: Vec<Arc<Slot>> = self.inner.slots.read().unwrap().clone();
            for slot in &slots {
                let mut q = slot.queue.lock().unwrap();
                while (!q.events.is_empty() || q.busy) && !q.closed {
                    let now = Instant::now();
                    if now >= deadline {
                        drop(q);
                        return Err(BrokerError::DrainTimeout(self.stats()));
                    }
                    q = slot.idle.wait_timeout(q, deadline - now).unwrap().0;
                }
            }
            let settled = slots.iter().all(|s| {
                let q = s.queue.lock().unwrap();
                q.events.is_empty() && !q.busy
            });
            if settled && self.published() == before {
                return Ok(self.stats());
            }
            if Instant::now() >= deadline {
                return Err(BrokerError::DrainTimeout(self.stats()));
            }
        }
    }

    /// Refuse further publishes, let workers finish their queues, and join
    /// them. Must not be called from inside a handler.
    pub fn shutdown(&self, timeout: Duration) -> Result<DrainStats, BrokerError> {
        let drained = self.drain(timeout);
        self.inner.running.store(false, Ordering::SeqCst);
        for slot in self.inner.slots.read().unwrap().iter() {
            slot.close();
        }
        let workers: Vec<JoinHandle<()>> = std::mem::take(&mut *self.inner.workers.lock().unwrap());
        if drained.is_ok() {
            for w in workers {
                let _ = w.join();
            }
        }
        drained
    }
}
