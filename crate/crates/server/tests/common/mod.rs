#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use modelwatch::config::Config;
use serde_json::{json, Value};

pub type ModelFn = Arc<dyn Fn(&[Value]) -> Value + Send + Sync>;

pub const HEALTHY: u8 = 0;
pub const FAIL_500: u8 = 1;
pub const GARBAGE: u8 = 2;
pub const SLOW: u8 = 3;

pub struct StubUpstream {
    pub addr: SocketAddr,
    pub mode: Arc<AtomicU8>,
    pub calls: Arc<AtomicU64>,
    pub instances: Arc<AtomicU64>,
}

impl StubUpstream {
    pub fn url(&self) -> String {
        format!("http://{}/predict", self.addr)
    }

    pub fn set_mode(&self, mode: u8) {
        self.mode.store(mode, Ordering::SeqCst);
    }
}

#[derive(Clone)]
struct StubState {
    model: ModelFn,
    mode: Arc<AtomicU8>,
    calls: Arc<AtomicU64>,
    instances: Arc<AtomicU64>,
}

async fn stub_predict(State(s): State<StubState>, body: Bytes) -> Response {
    s.calls.fetch_add(1, Ordering::SeqCst);
    match s.mode.load(Ordering::SeqCst) {
        FAIL_500 => return (StatusCode::INTERNAL_SERVER_ERROR, "{\"error\":\"boom\"}").into_response(),
        GARBAGE => return (StatusCode::OK, "not json").into_response(),
        SLOW => tokio::time::sleep(Duration::from_millis(500)).await,
        _ => {}
    }
    let v: Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(_) => return (StatusCode::BAD_REQUEST, "{}").into_response(),
    };
    let instances = v["instances"].as_array().cloned().unwrap_or_default();
    s.instances.fetch_add(instances.len() as u64, Ordering::SeqCst);
    let preds: Vec<Value> = instances.iter().map(|i| (s.model)(i.as_array().unwrap())).collect();
    (
        StatusCode::OK,
        [("content-type", "application/json")],
        json!({ "predictions": preds }).to_string(),
    )
        .into_response()
}

pub async fn start_stub(model: ModelFn) -> StubUpstream {
    let mode = Arc::new(AtomicU8::new(HEALTHY));
    let calls = Arc::new(AtomicU64::new(0));
    let instances = Arc::new(AtomicU64::new(0));
    let state = StubState {
        model,
        mode: Arc::clone(&mode),
        calls: Arc::clone(&calls),
        instances: Arc::clone(&instances),
    };
    let app = Router::new().route("/predict", post(stub_predict)).with_state(state);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    StubUpstream { addr, mode, calls, instances }
}

/// Binary classifier: class 1 iff x0 > 0.5.
pub fn rule_model() -> ModelFn {
    Arc::new(|x: &[Value]| {
        let p = if x[0].as_f64().unwrap() > 0.5 { 0.9 } else { 0.1 };
        json!([1.0 - p, p])
    })
}

pub fn write_uniform_reference(path: &Path, n: usize, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut s = String::from("x0,x1\n");
    for _ in 0..n {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        s.push_str(&format!("{a},{b}\n"));
    }
    std::fs::write(path, s).unwrap();
}

/// Two uniform numerical features, rule-model upstream.
pub fn uniform_config(dir: &Path, upstream: &str, extra: &str) -> Config {
    let reference = dir.join("reference.csv");
    if !reference.exists() {
        write_uniform_reference(&reference, 400, 1);
    }
    let text = format!(
        r#"
[upstream]
url = "{upstream}"
timeout_ms = 200

[schema]
features = [
  {{ name = "x0", kind = "numerical" }},
  {{ name = "x1", kind = "numerical" }},
]

[reference]
path = "reference.csv"

{extra}
"#
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    Config::load(&path).unwrap()
}

pub fn client() -> reqwest::Client {
    reqwest::Client::builder().build().unwrap()
}

pub async fn post_json(c: &reqwest::Client, url: String, body: Value) -> reqwest::Response {
    c.post(url).json(&body).send().await.unwrap()
}
