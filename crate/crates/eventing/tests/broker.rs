use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use modelwatch_eventing::{chain_sink, Broker, Event, Filter, Sink};
use proptest::prelude::*;
use serde_json::json;

fn ev(topic: &str, kind: &str, n: u64) -> Event {
    Event::new(topic, kind, json!({ "n": n }), n)
}

#[test]
fn slow_handler_drains_within_timeout() {
    let b = Broker::new();
    b.register_trigger("sleepy", Filter::any(), 16, |_| {
        std::thread::sleep(Duration::from_millis(50));
        Ok(())
    })
    .unwrap();
    for n in 0..10 {
        b.publish(ev("t", "x", n)).unwrap();
    }
    let stats = b.drain(Duration::from_secs(1)).unwrap();
    assert_eq!(stats.triggers[0].delivered, 10);
}

#[test]
fn publish_latency_independent_of_handler_sleep() {
    let b = Broker::new();
    b.register_trigger("blocking", Filter::any(), 64, |_| {
        std::thread::sleep(Duration::from_millis(100));
        Ok(())
    })
    .unwrap();
    let mut lat: Vec<Duration> = (0..500)
        .map(|n| {
            let t = Instant::now();
            b.publish(ev("t", "x", n)).unwrap();
            t.elapsed()
        })
        .collect();
    lat.sort();
    let p99 = lat[lat.len() * 99 / 100];
    assert!(p99 < Duration::from_millis(5), "publish p99 {p99:?}");
    let stats = b.stats();
    assert!(stats.triggers[0].dropped > 0);
}

#[test]
fn jsonl_sink_writes_one_parseable_line_per_event() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("predictions.jsonl");
    let b = Broker::new();
    chain_sink(&b, "store", Filter::topic("predictions"), Sink::Jsonl { path: path.clone() }, 64).unwrap();
    for n in 0..10 {
        b.publish(ev("predictions", "prediction", n)).unwrap();
    }
    b.publish(ev("other", "prediction", 99)).unwrap();
    b.drain(Duration::from_secs(1)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<Event> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 10);
    assert!(lines.iter().enumerate().all(|(i, e)| e.timestamp == i as u64 && !e.id.is_empty()));
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["id", "topic", "type", "timestamp", "payload"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn alert_sink_filters_by_type() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("alerts.jsonl");
    let b = Broker::new();
    chain_sink(&b, "alerts", Filter::kind("alert"), Sink::AlertLog { path: path.clone() }, 16).unwrap();
    b.publish(ev("monitoring", "drift-report", 1)).unwrap();
    b.publish(ev("monitoring", "alert", 2)).unwrap();
    b.drain(Duration::from_secs(1)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains("\"type\":\"alert\""));
}

#[test]
fn unwritable_sink_counts_errors_and_broker_continues() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing-dir").join("out.jsonl");
    let b = Broker::new();
    let sink = chain_sink(&b, "broken", Filter::any(), Sink::Jsonl { path }, 16).unwrap();
    let (tx, rx) = mpsc::channel();
    b.register_trigger("healthy", Filter::any(), 16, move |e| {
        tx.send(e.timestamp).unwrap();
        Ok(())
    })
    .unwrap();
    for n in 0..3 {
        b.publish(ev("t", "x", n)).unwrap();
    }
    let stats = b.drain(Duration::from_secs(1)).unwrap();
    assert_eq!(stats.trigger(sink).unwrap().handler_errors, 3);
    assert_eq!(rx.try_iter().count(), 3);
}

#[test]
fn concurrent_publishers_conserve_events() {
    let b = Broker::new();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let s = Arc::clone(&seen);
    let id = b
        .register_trigger("collect", Filter::topic("a"), 8, move |e| {
            s.lock().unwrap().push(e.payload["n"].as_u64().unwrap());
            Ok(())
        })
        .unwrap();
    let handles: Vec<_> = (0..4)
        .map(|t| {
            let b = b.clone();
            std::thread::spawn(move || {
                for n in 0..250 {
                    b.publish(ev(if n % 2 == 0 { "a" } else { "b" }, "x", t * 1000 + n)).unwrap();
                }
            })
        })
        .collect();
    handles.into_iter().for_each(|h| h.join().unwrap());
    let stats = b.drain(Duration::from_secs(5)).unwrap();
    let t = stats.trigger(id).unwrap();
    assert_eq!(stats.published, 1000);
    assert_eq!(t.matched, 500);
    assert_eq!(t.delivered + t.dropped, t.matched);
    let seen = seen.lock().unwrap();
    for thread in 0..4u64 {
        let mine: Vec<u64> = seen.iter().copied().filter(|n| n / 1000 == thread).collect();
        assert!(mine.windows(2).all(|w| w[0] < w[1]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conservation_and_order(
        topics in prop::collection::vec(0u8..3, 0..200),
        capacity in 1usize..8,
        sleep_us in 0u64..300,
    ) {
        let b = Broker::new();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s = Arc::clone(&seen);
        let id = b.register_trigger("t", Filter::topic("t0"), capacity, move |e| {
            std::thread::sleep(Duration::from_micros(sleep_us));
            s.lock().unwrap().push(e.timestamp);
            Ok(())
        }).unwrap();
        for (i, t) in topics.iter().enumerate() {
            b.publish(ev(&format!("t{t}"), "x", i as u64)).unwrap();
        }
        let stats = b.drain(Duration::from_secs(10)).unwrap();
        let t = stats.trigger(id).unwrap();
        let matching: Vec<u64> = topics.iter().enumerate().filter(|(_, t)| **t == 0).map(|(i, _)| i as u64).collect();
        prop_assert_eq!(t.matched, matching.len() as u64);
        prop_assert_eq!(t.delivered + t.dropped, t.matched);
        let seen = seen.lock().unwrap();
        prop_assert_eq!(seen.len() as u64, t.delivered);
        let mut it = matching.iter();
        for s in seen.iter() {
            prop_assert!(it.any(|m| m == s), "delivered sequence is not a subsequence");
        }
    }
}
