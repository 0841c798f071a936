mod common;

use std::sync::Arc;
use std::time::Duration;

use common::*;
use modelwatch::gateway::REQUEST_ID_HEADER;
use modelwatch::service;
use modelwatch::Server;
use modelwatch_eventing::Filter;
use serde_json::{json, Value};

const SETTLE: Duration = Duration::from_secs(20);

async fn serve(config: modelwatch::Config) -> Server {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    service::start(config, listener, true).await.unwrap()
}

fn url(s: &Server, path: &str) -> String {
    format!("http://{}{}", s.addr(), path)
}

fn predictions(s: &Server) -> u64 {
    let m = s.state().monitor().unwrap();
    m.counters.predictions.load(std::sync::atomic::Ordering::SeqCst)
}

async fn metrics_text(s: &Server) -> String {
    client().get(url(s, "/metrics")).send().await.unwrap().text().await.unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn predict_returns_upstream_body_and_logs_one_event() {
    let stub = start_stub(rule_model()).await;
    let dir = tempfile::tempdir().unwrap();
    let s = serve(uniform_config(dir.path(), &stub.url(), "")).await;
    let r = post_json(&client(), url(&s, "/v1/predict"), json!({"instances": [[0.9, 0.2]]})).await;
    assert_eq!(r.status(), 200);
    let id = r.headers()[REQUEST_ID_HEADER].to_str().unwrap().to_string();
    assert!(uuid::Uuid::parse_str(&id).is_ok());
    let body = r.text().await.unwrap();
    assert_eq!(body, json!({"predictions": [[0.09999999999999998, 0.9]]}).to_string());
    s.settle(SETTLE).await.unwrap();
    assert_eq!(predictions(&s), 1);
    assert!(s.state().ledger().get(&id).is_some());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn batch_request_ids_are_suffixed_per_instance() {
    let stub = start_stub(rule_model()).await;
    let dir = tempfile::tempdir().unwrap();
    let s = serve(uniform_config(dir.path(), &stub.url(), "")).await;
    let r = post_json(&client(), url(&s, "/v1/predict"), json!({"instances": [[0.9, 0.2], [0.1, 0.3]]})).await;
    assert_eq!(r.status(), 200);
    let id = r.headers()[REQUEST_ID_HEADER].to_str().unwrap().to_string();
    s.settle(SETTLE).await.unwrap();
    assert_eq!(predictions(&s), 2);
    let ledger = s.state().ledger();
    assert_eq!(ledger.get(&format!("{id}:0")).unwrap().predicted_label, Some(1));
    assert_eq!(ledger.get(&format!("{id}:1")).unwrap().predicted_label, Some(0));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bad_requests_are_rejected_without_events() {
    let stub = start_stub(rule_model()).await;
    let dir = tempfile::tempdir().unwrap();
    let s = serve(uniform_config(dir.path(), &stub.url(), "")).await;
    let c = client();
    let r = c.post(url(&s, "/v1/predict")).body("{not json").send().await.unwrap();
    assert_eq!(r.status(), 400);
    let r = post_json(&c, url(&s, "/v1/predict"), json!({"instances": [[0.9]]})).await;
    assert_eq!(r.status(), 400);
    let r = post_json(&c, url(&s, "/v1/predict"), json!({"instances": [["a", 0.2]]})).await;
    assert_eq!(r.status(), 400);
    let r = post_json(&c, url(&s, "/v1/predict"), json!({"rows": []})).await;
    assert_eq!(r.status(), 400);
    s.settle(SETTLE).await.unwrap();
    assert_eq!(s.state().broker().published(), 0);
    assert_eq!(stub.calls.load(std::sync::atomic::Ordering::SeqCst), 0);
    assert!(metrics_text(&s).await.contains("modelwatch_validation_failures_total 4"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn upstream_failures_map_to_gateway_errors() {
    let stub = start_stub(rule_model()).await;
    let dir = tempfile::tempdir().unwrap();
    let s = serve(uniform_config(dir.path(), &stub.url(), "")).await;
    let c = client();
    let body = json!({"instances": [[0.9, 0.2]]});

    stub.set_mode(SLOW);
    assert_eq!(post_json(&c, url(&s, "/v1/predict"), body.clone()).await.status(), 504);
    stub.set_mode(GARBAGE);
    assert_eq!(post_json(&c, url(&s, "/v1/predict"), body.clone()).await.status(), 502);
    stub.set_mode(FAIL_500);
    let r = post_json(&c, url(&s, "/v1/predict"), body.clone()).await;
    assert_eq!(r.status(), 500);
    assert_eq!(r.text().await.unwrap(), "{\"error\":\"boom\"}");

    s.settle(SETTLE).await.unwrap();
    assert_eq!(s.state().broker().published(), 0);
    let text = metrics_text(&s).await;
    assert!(text.contains("modelwatch_upstream_errors_total{reason=\"timeout\"} 1"));
    assert!(text.contains("modelwatch_upstream_errors_total{reason=\"malformed\"} 1"));
    assert!(text.contains("modelwatch_upstream_errors_total{reason=\"status\"} 1"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unreachable_upstream_is_502() {
    let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = dead.local_addr().unwrap();
    drop(dead);
    let dir = tempfile::tempdir().unwrap();
    let s = serve(uniform_config(dir.path(), &format!("http://{addr}/predict"), "")).await;
    let r = post_json(&client(), url(&s, "/v1/predict"), json!({"instances": [[0.9, 0.2]]})).await;
    assert_eq!(r.status(), 502);
    s.settle(SETTLE).await.unwrap();
    assert_eq!(s.state().broker().published(), 0);
    assert!(metrics_text(&s)
        .await
        .contains("modelwatch_upstream_errors_total{reason=\"unavailable\"} 1"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn feedback_joins_inline_and_rejects() {
    let stub = start_stub(rule_model()).await;
    let dir = tempfile::tempdir().unwrap();
    let s = serve(uniform_config(dir.path(), &stub.url(), "")).await;
    let c = client();
    let r = post_json(&c, url(&s, "/v1/predict"), json!({"instances": [[0.9, 0.2]]})).await;
    let id = r.headers()[REQUEST_ID_HEADER].to_str().unwrap().to_string();

    let fb = |b: Value| post_json(&c, url(&s, "/v1/feedback"), b);
    assert_eq!(fb(json!({"request_id": id, "truth": 1})).await.status(), 202);
    assert_eq!(fb(json!({"predicted": 0, "truth": 1})).await.status(), 202);
    assert_eq!(fb(json!({"request_id": "nope", "truth": 1})).await.status(), 404);
    assert_eq!(fb(json!({"truth": 1})).await.status(), 400);
    assert_eq!(fb(json!({"predicted": 0, "truth": 7})).await.status(), 400);
    assert_eq!(fb(json!({"predicted": 0, "truth": 1, "instance": [1.0]})).await.status(), 400);

    s.settle(SETTLE).await.unwrap();
    let perf: Value = c.get(url(&s, "/v1/performance")).send().await.unwrap().json().await.unwrap();
    assert_eq!(perf["lifetime"]["count"], 2);
    assert_eq!(perf["lifetime"]["values"]["accuracy"], 0.5);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stats_snapshots() {
    let stub = start_stub(rule_model()).await;
    let dir = tempfile::tempdir().unwrap();
    let s = serve(uniform_config(dir.path(), &stub.url(), "")).await;
    let c = client();
    let get = |q: &str| c.get(url(&s, &format!("/v1/stats{q}"))).send();

    let empty: Value = get("?feature=x0").await.unwrap().json().await.unwrap();
    assert_eq!(empty["lifetime"]["features"]["inputs"]["x0"]["count"], 0);
    assert_eq!(get("?feature=nope").await.unwrap().status(), 404);
    assert_eq!(get("?window=weekly").await.unwrap().status(), 400);

    for x in [0.1, 0.4, 0.8] {
        post_json(&c, url(&s, "/v1/predict"), json!({"instances": [[x, 0.5]]})).await;
    }
    s.settle(SETTLE).await.unwrap();
    let snap: Value = get("?feature=x0").await.unwrap().json().await.unwrap();
    let x0 = &snap["lifetime"]["features"]["inputs"]["x0"];
    assert_eq!(x0["count"], 3);
    assert!((x0["mean"].as_f64().unwrap() - 1.3 / 3.0).abs() < 1e-12);
    let out: Value = get("?feature=output_1&window=lifetime").await.unwrap().json().await.unwrap();
    assert_eq!(out["lifetime"]["features"]["outputs"]["output_1"]["count"], 3);
}

fn uniform_batch(n: usize, seed: u64, shift: f64) -> Vec<Value> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            json!([a + shift, b])
        })
        .collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn drift_report_after_full_batch() {
    let stub = start_stub(rule_model()).await;
    let dir = tempfile::tempdir().unwrap();
    let extra = "[drift]\nmin_batch = 100\nseed = 3\n\n[label_drift]\nmin_batch = 100\npreprocessor = \"bbsd\"\n";
    let s = serve(uniform_config(dir.path(), &stub.url(), extra)).await;
    let c = client();
    assert_eq!(c.get(url(&s, "/v1/drift")).send().await.unwrap().status(), 204);

    let batch = uniform_batch(100, 99, 0.0);
    post_json(&c, url(&s, "/v1/predict"), json!({ "instances": batch[..99] })).await;
    s.settle(SETTLE).await.unwrap();
    assert_eq!(c.get(url(&s, "/v1/drift?kind=covariate")).send().await.unwrap().status(), 204);

    post_json(&c, url(&s, "/v1/predict"), json!({ "instances": batch[99..] })).await;
    s.settle(SETTLE).await.unwrap();
    let cov: Value = c.get(url(&s, "/v1/drift?kind=covariate")).send().await.unwrap().json().await.unwrap();
    assert_eq!(cov["drift_detected"], false);
    assert_eq!(cov["n_test"].as_u64().unwrap() + s.state().monitor().unwrap().outliers(0)["flagged"].as_u64().unwrap(), 100);
    let label: Value = c.get(url(&s, "/v1/drift?kind=label")).send().await.unwrap().json().await.unwrap();
    assert_eq!(label["kind"], "label");
    assert_eq!(label["feature_space"], json!(["class_0", "class_1"]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn shifted_batch_raises_drift_alert() {
    let stub = start_stub(rule_model()).await;
    let dir = tempfile::tempdir().unwrap();
    let extra = "[drift]\nmin_batch = 100\n\n[outlier]\ndetector = \"none\"\n";
    let s = serve(uniform_config(dir.path(), &stub.url(), extra)).await;
    let c = client();
    post_json(&c, url(&s, "/v1/predict"), json!({ "instances": uniform_batch(100, 5, 0.5) })).await;
    s.settle(SETTLE).await.unwrap();
    let cov: Value = c.get(url(&s, "/v1/drift")).send().await.unwrap().json().await.unwrap();
    assert_eq!(cov["drift_detected"], true);
    assert_eq!(cov["features"][0]["reject"], true);
    assert!(metrics_text(&s).await.contains("modelwatch_drift_alerts_total 1"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn outliers_are_flagged_and_listed() {
    let stub = start_stub(rule_model()).await;
    let dir = tempfile::tempdir().unwrap();
    let s = serve(uniform_config(dir.path(), &stub.url(), "")).await;
    let c = client();
    post_json(&c, url(&s, "/v1/predict"), json!({"instances": [[0.5, 0.5], [40.0, -30.0]]})).await;
    s.settle(SETTLE).await.unwrap();
    let o: Value = c.get(url(&s, "/v1/outliers/latest")).send().await.unwrap().json().await.unwrap();
    assert_eq!(o["scored"], 2);
    assert_eq!(o["flagged"], 1);
    assert!(o["outliers"][0]["request_id"].as_str().unwrap().ends_with(":1"));
    assert_eq!(o["latest"]["is_outlier"], true);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn explain_finds_rule_anchor_without_touching_monitoring() {
    let stub = start_stub(rule_model()).await;
    let dir = tempfile::tempdir().unwrap();
    let s = serve(uniform_config(dir.path(), &stub.url(), "[explainer]\nn_samples = 500\nseed = 4\n")).await;
    let c = client();
    s.settle(SETTLE).await.unwrap();
    let before = (s.state().broker().published(), s.state().ledger().len(), predictions(&s));

    let r = post_json(&c, url(&s, "/v1/explain"), json!({"instance": [0.9, 0.2]})).await;
    assert_eq!(r.status(), 200);
    let e: Value = r.json().await.unwrap();
    assert!(e["precision"].as_f64().unwrap() >= 0.95);
    let feats: Vec<&str> = e["predicates"].as_array().unwrap().iter().map(|p| p["feature"].as_str().unwrap()).collect();
    assert_eq!(feats, ["x0"]);
    assert!(e["queries_used"].as_u64().unwrap() > 0);

    assert_eq!(post_json(&c, url(&s, "/v1/explain"), json!({"instance": [0.9]})).await.status(), 400);
    stub.set_mode(FAIL_500);
    assert_eq!(post_json(&c, url(&s, "/v1/explain"), json!({"instance": [0.9, 0.2]})).await.status(), 502);

    s.settle(SETTLE).await.unwrap();
    let after = (s.state().broker().published(), s.state().ledger().len(), predictions(&s));
    assert_eq!(before, after);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn explain_budget_exhaustion_is_422_with_partial_result() {
    let stub = start_stub(rule_model()).await;
    let dir = tempfile::tempdir().unwrap();
    let extra = "[explainer]\nn_samples = 100\nbudget = 150\nprecision_target = 0.999\n";
    let s = serve(uniform_config(dir.path(), &stub.url(), extra)).await;
    let r = post_json(&client(), url(&s, "/v1/explain"), json!({"instance": [0.9, 0.2]})).await;
    assert_eq!(r.status(), 422);
    let v: Value = r.json().await.unwrap();
    assert_eq!(v["partial"], true);
    assert_eq!(v["explanation"]["converged"], false);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn metrics_start_at_zero_and_count_requests() {
    let stub = start_stub(rule_model()).await;
    let dir = tempfile::tempdir().unwrap();
    let s = serve(uniform_config(dir.path(), &stub.url(), "")).await;
    let fresh = metrics_text(&s).await;
    for line in [
        "modelwatch_requests_total{endpoint=\"predict\"} 0",
        "modelwatch_events_published_total 0",
        "modelwatch_events_dropped_total 0",
        "modelwatch_drift_alerts_total 0",
        "modelwatch_outliers_flagged_total 0",
        "modelwatch_performance_alerts_total 0",
        "modelwatch_predict_latency_seconds_count 0",
    ] {
        assert!(fresh.contains(line), "missing `{line}`");
    }
    let c = client();
    for _ in 0..5 {
        post_json(&c, url(&s, "/v1/predict"), json!({"instances": [[0.3, 0.3]]})).await;
    }
    let text = metrics_text(&s).await;
    assert!(text.contains("modelwatch_requests_total{endpoint=\"predict\"} 5"));
    assert!(text.contains("modelwatch_predict_latency_seconds_count 5"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn queue_overflow_shows_in_dropped_counter() {
    let stub = start_stub(rule_model()).await;
    let dir = tempfile::tempdir().unwrap();
    let s = serve(uniform_config(dir.path(), &stub.url(), "")).await;
    s.state()
        .broker()
        .register_trigger("slow", Filter::kind("prediction"), 1, |_| {
            std::thread::sleep(Duration::from_millis(50));
            Ok(())
        })
        .unwrap();
    let instances: Vec<Value> = (0..20).map(|i| json!([i as f64 / 20.0, 0.5])).collect();
    post_json(&client(), url(&s, "/v1/predict"), json!({ "instances": instances })).await;
    let stats = s.settle(SETTLE).await.unwrap();
    assert!(stats.dropped() > 0);
    for t in &stats.triggers {
        assert_eq!(t.delivered + t.dropped, t.matched, "{}", t.name);
    }
    let text = metrics_text(&s).await;
    let dropped: u64 = text
        .lines()
        .find_map(|l| l.strip_prefix("modelwatch_events_dropped_total "))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(dropped, stats.dropped());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn proxy_only_mode_logs_nothing() {
    let stub = start_stub(rule_model()).await;
    let dir = tempfile::tempdir().unwrap();
    let config = uniform_config(dir.path(), &stub.url(), "");
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let s = service::start(config, listener, false).await.unwrap();
    let c = client();
    let r = post_json(&c, url(&s, "/v1/predict"), json!({"instances": [[0.9, 0.2]]})).await;
    assert_eq!(r.status(), 200);
    assert_eq!(c.get(url(&s, "/v1/stats")).send().await.unwrap().status(), 503);
    s.settle(SETTLE).await.unwrap();
    assert_eq!(s.state().broker().published(), 0);
    let stats = s.shutdown(SETTLE).await.unwrap();
    assert_eq!(stats.published, 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn jsonl_sink_is_flushed_on_shutdown() {
    let stub = start_stub(rule_model()).await;
    let dir = tempfile::tempdir().unwrap();
    let extra = r#"
[[eventing.sinks]]
name = "payload-log"
filter = { topic = "predictions" }
sink = { kind = "jsonl", path = "payloads.jsonl" }
"#;
    let s = serve(uniform_config(dir.path(), &stub.url(), extra)).await;
    let c = Arc::new(client());
    for i in 0..30 {
        post_json(&c, url(&s, "/v1/predict"), json!({"instances": [[i as f64 / 30.0, 0.5]]})).await;
    }
    let stats = s.shutdown(SETTLE).await.unwrap();
    assert_eq!(stats.dropped(), 0);
    let log = std::fs::read_to_string(dir.path().join("payloads.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 30);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["type"], "prediction");
}
