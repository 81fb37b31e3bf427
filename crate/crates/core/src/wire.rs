//! JSON-over-HTTP transport shared by the remote providers, with
//! record/replay cassettes for offline runs.
//!
//! A request is identified by the SHA-256 of `POST {path}\n{body}` where the
//! body is serialized compactly with object keys sorted. Cassettes are JSON
//! lines of `{"request_hash": str, "response": object}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("POST {path}: HTTP status {status}")]
    Status { path: String, status: u16 },
    #[error("POST {path}: timed out after {attempts} attempt(s)")]
    Timeout { path: String, attempts: u32 },
    #[error("POST {path}: {message} (after {attempts} attempt(s))")]
    Network { path: String, message: String, attempts: u32 },
    #[error("POST {path}: response is not JSON: {message}")]
    Decode { path: String, message: String },
    #[error("POST {path}: request {hash} is not in the cassette")]
    NotRecorded { path: String, hash: String },
    #[error("cassette {path}: {message}")]
    Cassette { path: String, message: String },
}

pub trait Transport: Send + Sync {
    fn post_json(&self, path: &str, body: &Value) -> Result<Value, TransportError>;
}

/// Compact JSON with object keys in sorted order.
pub fn canonical_json(value: &Value) -> String {
    fn write(v: &Value, out: &mut String) {
        match v {
            Value::Object(map) => {
                out.push('{');
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                for (i, k) in keys.into_iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&Value::String(k.clone()).to_string());
                    out.push(':');
                    write(&map[k], out);
                }
                out.push('}');
            }
            Value::Array(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(item, out);
                }
                out.push(']');
            }
            other => out.push_str(&other.to_string()),
        }
    }
    let mut out = String::new();
    write(value, &mut out);
    out
}

pub fn request_hash(path: &str, body: &Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(format!("POST {path}\n{}", canonical_json(body)).as_bytes());
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, initial_backoff: Duration::from_millis(250), timeout: Duration::from_secs(60) }
    }
}

/// Blocking HTTP client against a base URL such as `http://host:8080`.
///
/// Connection failures, timeouts, 429 and 5xx responses are retried with
/// exponential backoff; other non-200 statuses fail immediately.
pub struct HttpTransport {
    base_url: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl HttpTransport {
    pub fn new(base_url: impl Into<String>, retry: RetryPolicy) -> Result<Self, TransportError> {
        let base_url = base_url.into().trim_end_matches('/').to_string();
        let client = reqwest::blocking::Client::builder()
            .timeout(retry.timeout)
            .build()
            .map_err(|e| TransportError::Network { path: base_url.clone(), message: e.to_string(), attempts: 0 })?;
        Ok(Self { base_url, client, retry })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, path: &str, body: &Value) -> Result<Value, TransportError> {
        let url = format!("{}{}", self.base_url, path);
        let attempts = self.retry.attempts.max(1);
        let mut backoff = self.retry.initial_backoff;
        let mut last = None;
        for attempt in 1..=attempts {
            if attempt > 1 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            let err = match self.client.post(&url).json(body).send() {
                Ok(resp) if resp.status().as_u16() == 200 => {
                    let text = resp
                        .text()
                        .map_err(|e| TransportError::Decode { path: path.to_string(), message: e.to_string() })?;
                    return serde_json::from_str(&text)
                        .map_err(|e| TransportError::Decode { path: path.to_string(), message: e.to_string() });
                }
                Ok(resp) => {
                    let status = resp.status();
                    let err = TransportError::Status { path: path.to_string(), status: status.as_u16() };
                    if !(status.is_server_error() || status.as_u16() == 429) {
                        return Err(err);
                    }
                    err
                }
                Err(e) if e.is_timeout() => TransportError::Timeout { path: path.to_string(), attempts: attempt },
                Err(e) => TransportError::Network { path: path.to_string(), message: e.to_string(), attempts: attempt },
            };
            last = Some(err);
        }
        Err(last.expect("at least one attempt"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub request_hash: String,
    pub response: Value,
}

/// Recorded responses keyed by request hash.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Cassette {
    entries: BTreeMap<String, Value>,
}

impl Cassette {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let e: CassetteEntry = serde_json::from_str(raw).map_err(|e| format!("line {}: {e}", i + 1))?;
            if let Some(prev) = entries.insert(e.request_hash.clone(), e.response.clone()) {
                if prev != e.response {
                    return Err(format!("line {}: conflicting responses for {}", i + 1, e.request_hash));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TransportError> {
        let path = path.as_ref();
        let cassette_err = |message: String| TransportError::Cassette { path: path.display().to_string(), message };
        let text = fs::read_to_string(path).map_err(|e| cassette_err(e.to_string()))?;
        Self::parse(&text).map_err(cassette_err)
    }

    pub fn get(&self, hash: &str) -> Option<&Value> {
        self.entries.get(hash)
    }

    pub fn insert(&mut self, hash: String, response: Value) {
        self.entries.insert(hash, response);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted by hash, so saving the same content is byte-identical.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (hash, response) in &self.entries {
            let entry = CassetteEntry { request_hash: hash.clone(), response: response.clone() };
            out.push_str(&serde_json::to_string(&entry).expect("entry serializes"));
            out.push('\n');
        }
        out
    }
}

/// Serves responses from a cassette; unknown requests fail.
pub struct ReplayTransport {
    cassette: Cassette,
}

impl ReplayTransport {
    pub fn new(cassette: Cassette) -> Self {
        Self { cassette }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TransportError> {
        Ok(Self::new(Cassette::load(path)?))
    }
}

impl Transport for ReplayTransport {
    fn post_json(&self, path: &str, body: &Value) -> Result<Value, TransportError> {
        let hash = request_hash(path, body);
        self.cassette.get(&hash).cloned().ok_or_else(|| TransportError::NotRecorded { path: path.to_string(), hash })
    }
}

/// Forwards to an inner transport and remembers successful responses.
pub struct RecordingTransport<T> {
    inner: T,
    recorded: Mutex<Cassette>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self { inner, recorded: Mutex::new(Cassette::default()) }
    }

    pub fn cassette(&self) -> Cassette {
        self.recorded.lock().expect("cassette lock").clone()
    }

    /// Writes everything recorded so far, merged with any existing file.
    pub fn save(&self, path: impl Into<PathBuf>) -> Result<(), TransportError> {
        let path = path.into();
        let mut merged = if path.exists() { Cassette::load(&path)? } else { Cassette::default() };
        for (hash, response) in &self.recorded.lock().expect("cassette lock").entries {
            merged.insert(hash.clone(), response.clone());
        }
        fs::write(&path, merged.to_jsonl())
            .map_err(|e| TransportError::Cassette { path: path.display().to_string(), message: e.to_string() })
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn post_json(&self, path: &str, body: &Value) -> Result<Value, TransportError> {
        let response = self.inner.post_json(path, body)?;
        self.recorded.lock().expect("cassette lock").insert(request_hash(path, body), response.clone());
        Ok(response)
    }
}
