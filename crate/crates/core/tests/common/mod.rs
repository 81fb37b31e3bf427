//! Shared helpers: fixture paths and an in-process mock of the model
//! endpoints.

#![allow(dead_code)]

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

/// What the mock has seen so far.
#[derive(Default)]
pub struct Seen {
    hits: Mutex<HashMap<String, usize>>,
    batches: Mutex<Vec<usize>>,
}

impl Seen {
    pub fn hits(&self, key: &str) -> usize {
        self.hits.lock().unwrap().get(key).copied().unwrap_or(0)
    }

    pub fn batch_sizes(&self) -> Vec<usize> {
        let mut sizes = self.batches.lock().unwrap().clone();
        sizes.sort_unstable();
        sizes
    }

    fn hit(&self, key: &str) -> usize {
        let mut hits = self.hits.lock().unwrap();
        let n = hits.entry(key.to_string()).or_default();
        *n += 1;
        *n
    }
}

pub struct MockServer {
    pub base_url: String,
    pub seen: Arc<Seen>,
}

/// Starts the mock on an ephemeral port. The server lives until the test
/// process exits.
///
/// QE behaviour is selected by model name: `flaky` fails twice with 503,
/// `broken` always answers 500, `rejected` answers 400, `garbage` sends a
/// non-JSON body, `missing` omits the score and `slow` stalls for 1.5 s.
/// Any other model scores `mt` length / 100.
pub fn start_mock() -> MockServer {
    let seen = Arc::new(Seen::default());
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let base_url = format!("http://{}", listener.local_addr().unwrap());
    let app = Router::new()
        .route("/v1/qe", post(qe))
        .route("/v1/emotion", post(emotion))
        .route("/v1/logprob", post(logprob))
        .with_state(seen.clone());
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    MockServer { base_url, seen }
}

type Reply = (StatusCode, String);

fn ok(v: Value) -> Reply {
    (StatusCode::OK, v.to_string())
}

fn chars(v: &Value) -> usize {
    v.as_str().map(|s| s.chars().count()).unwrap_or(0)
}

async fn qe(State(seen): State<Arc<Seen>>, Json(body): Json<Value>) -> Reply {
    let model = body["model"].as_str().unwrap_or_default().to_string();
    let n = seen.hit(&model);
    match model.as_str() {
        "flaky" if n <= 2 => (StatusCode::SERVICE_UNAVAILABLE, "busy".into()),
        "broken" => (StatusCode::INTERNAL_SERVER_ERROR, "boom".into()),
        "rejected" => (StatusCode::BAD_REQUEST, "bad".into()),
        "garbage" => (StatusCode::OK, "not json".into()),
        "missing" => ok(json!({"value": 1.0})),
        "slow" => {
            tokio::time::sleep(Duration::from_millis(1500)).await;
            ok(json!({"score": 0.5}))
        }
        _ => ok(json!({"score": chars(&body["mt"]) as f64 / 100.0})),
    }
}

async fn emotion(State(seen): State<Arc<Seen>>, Json(body): Json<Value>) -> Reply {
    seen.hit("emotion");
    let text = body["text"].as_str().unwrap_or_default();
    let label = if text.contains("???") {
        "bogus"
    } else if text.contains("哈哈") {
        "joy"
    } else if text.contains('！') {
        "anger"
    } else {
        "neutral"
    };
    ok(json!({"label": label}))
}

async fn logprob(State(seen): State<Arc<Seen>>, Json(body): Json<Value>) -> Reply {
    let model = body["model"].as_str().unwrap_or_default().to_string();
    seen.hit(&model);
    let texts = body["texts"].as_array().cloned().unwrap_or_default();
    seen.batches.lock().unwrap().push(texts.len());
    let mut lps: Vec<f64> = texts.iter().map(|t| -1.5 * chars(t) as f64).collect();
    match model.as_str() {
        "short" => {
            lps.pop();
        }
        "positive" => lps.iter_mut().for_each(|v| *v = 0.25),
        _ => {}
    }
    ok(json!({"logprobs": lps}))
}
