//! Prometheus text exposition.

use std::fmt::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use modelwatch_eventing::Broker;

use crate::pipeline::{Counters, MonitorState};

pub const ENDPOINTS: [&str; 9] = [
    "predict", "feedback", "stats", "drift", "outliers", "explain", "performance", "metrics", "healthz",
];

const UPSTREAM_REASONS: [&str; 4] = ["unavailable", "timeout", "malformed", "status"];

/// Latency bucket upper bounds in seconds.
const BUCKETS: [f64; 12] = [0.001, 0.0025, 0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 1.0, 2.5, 5.0];

#[derive(Debug, Default)]
pub struct Metrics {
    requests: [AtomicU64; ENDPOINTS.len()],
    errors: [AtomicU64; ENDPOINTS.len()],
    upstream_errors: [AtomicU64; UPSTREAM_REASONS.len()],
    validation_failures: AtomicU64,
    latency_buckets: [AtomicU64; BUCKETS.len()],
    latency_count: AtomicU64,
    latency_sum_micros: AtomicU64,
}

fn index(list: &[&str], name: &str) -> usize {
    list.iter().position(|e| *e == name).unwrap_or_else(|| panic!("unknown metric label {name}"))
}

impl Metrics {
    pub fn request(&self, endpoint: &str, status: u16) {
        let i = index(&ENDPOINTS, endpoint);
        self.requests[i].fetch_add(1, Ordering::Relaxed);
        if status >= 400 {
            self.errors[i].fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn upstream_error(&self, reason: &str) {
        self.upstream_errors[index(&UPSTREAM_REASONS, reason)].fetch_add(1, Ordering::Relaxed);
    }

    pub fn validation_failure(&self) {
        self.validation_failures.fetch_add(1, Ordering::Relaxed);
    }

    pub fn observe_latency(&self, elapsed: Duration) {
        let secs = elapsed.as_secs_f64();
        for (b, le) in self.latency_buckets.iter().zip(BUCKETS) {
            if secs <= le {
                b.fetch_add(1, Ordering::Relaxed);
            }
        }
        self.latency_count.fetch_add(1, Ordering::Relaxed);
        self.latency_sum_micros
            .fetch_add(elapsed.as_micros() as u64, Ordering::Relaxed);
    }

    pub fn requests(&self, endpoint: &str) -> u64 {
        self.requests[index(&ENDPOINTS, endpoint)].load(Ordering::Relaxed)
    }

    pub fn render(&self, broker: &Broker, monitor: Option<&MonitorState>) -> String {
        let mut out = String::new();
        let load = |a: &AtomicU64| a.load(Ordering::Relaxed);

        header(&mut out, "modelwatch_requests_total", "counter", "HTTP requests by endpoint.");
        for (e, c) in ENDPOINTS.iter().zip(&self.requests) {
            let _ = writeln!(out, "modelwatch_requests_total{{endpoint=\"{e}\"}} {}", load(c));
        }
        header(&mut out, "modelwatch_request_errors_total", "counter", "HTTP responses with status >= 400.");
        for (e, c) in ENDPOINTS.iter().zip(&self.errors) {
            let _ = writeln!(out, "modelwatch_request_errors_total{{endpoint=\"{e}\"}} {}", load(c));
        }
        header(&mut out, "modelwatch_upstream_errors_total", "counter", "Failed upstream calls by reason.");
        for (r, c) in UPSTREAM_REASONS.iter().zip(&self.upstream_errors) {
            let _ = writeln!(out, "modelwatch_upstream_errors_total{{reason=\"{r}\"}} {}", load(c));
        }
        header(&mut out, "modelwatch_validation_failures_total", "counter", "Requests rejected by schema validation.");
        let _ = writeln!(out, "modelwatch_validation_failures_total {}", load(&self.validation_failures));

        header(&mut out, "modelwatch_predict_latency_seconds", "histogram", "End-to-end predict latency.");
        for (b, le) in self.latency_buckets.iter().zip(BUCKETS) {
            let _ = writeln!(out, "modelwatch_predict_latency_seconds_bucket{{le=\"{le}\"}} {}", load(b));
        }
        let count = load(&self.latency_count);
        let _ = writeln!(out, "modelwatch_predict_latency_seconds_bucket{{le=\"+Inf\"}} {count}");
        let _ = writeln!(
            out,
            "modelwatch_predict_latency_seconds_sum {}",
            load(&self.latency_sum_micros) as f64 / 1e6
        );
        let _ = writeln!(out, "modelwatch_predict_latency_seconds_count {count}");

        let stats = broker.stats().triggers;
        let sum = |f: fn(&modelwatch_eventing::TriggerStats) -> u64| stats.iter().map(f).sum::<u64>();
        let simple = [
            ("modelwatch_events_published_total", "counter", "Events accepted by the broker.", broker.published()),
            ("modelwatch_events_delivered_total", "counter", "Events handled by triggers.", sum(|s| s.delivered)),
            ("modelwatch_events_dropped_total", "counter", "Events dropped on queue overflow.", sum(|s| s.dropped)),
            ("modelwatch_handler_errors_total", "counter", "Trigger handler failures.", sum(|s| s.handler_errors)),
            ("modelwatch_events_queued", "gauge", "Events waiting in trigger queues.", sum(|s| s.queued as u64)),
        ];
        for (name, kind, help, v) in simple {
            header(&mut out, name, kind, help);
            let _ = writeln!(out, "{name} {v}");
        }

        let zero = Counters::default();
        let c = monitor.map_or(&zero, |m| &m.counters);
        let monitored = [
            ("modelwatch_outliers_scored_total", "Instances scored by the outlier detector.", &c.outliers_scored),
            ("modelwatch_outliers_flagged_total", "Instances flagged as outliers.", &c.outliers_flagged),
            ("modelwatch_drift_reports_total", "Drift tests run.", &c.drift_reports),
            ("modelwatch_drift_alerts_total", "Drift tests that rejected the null.", &c.drift_alerts),
            ("modelwatch_performance_alerts_total", "Performance alert rules fired.", &c.performance_alerts),
        ];
        for (name, help, v) in monitored {
            header(&mut out, name, "counter", help);
            let _ = writeln!(out, "{name} {}", Counters::get(v));
        }
        out
    }
}

fn header(out: &mut String, name: &str, kind: &str, help: &str) {
    let _ = writeln!(out, "# HELP {name} {help}");
    let _ = writeln!(out, "# TYPE {name} {kind}");
}
