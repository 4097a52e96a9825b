//! HTTP plumbing shared by the LLM, text-to-image and embedding clients.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed backend response: {0}")]
    Decode(String),
    #[error("no recorded response for request {0}")]
    NotRecorded(String),
}

impl BackendError {
    /// Transport failures, 5xx and 429 are retried; everything else is final.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { code, .. } => *code == 429 || (500..600).contains(code),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base_ms: 250,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt` (1-based, attempt 1 has none).
    pub fn delay(&self, attempt: u32) -> Duration {
        if attempt <= 1 {
            return Duration::ZERO;
        }
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1 << (attempt - 2).min(16)))
    }

    /// Calls `op` until it succeeds, fails with a non-retryable error, or
    /// `max_attempts` is exhausted. `op` receives the 1-based attempt number.
    pub fn run<T>(&self, mut op: impl FnMut(u32) -> Result<T, BackendError>) -> Result<T, BackendError> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    log::warn!("attempt {attempt}/{attempts} failed: {e}");
                    attempt += 1;
                    thread::sleep(self.delay(attempt));
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Blocking HTTP client with retry and optional bearer token.
#[derive(Debug, Clone)]
pub struct HttpClient {
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    bearer: Option<String>,
}

impl HttpClient {
    pub fn new(retry: RetryPolicy, bearer: Option<String>, timeout: Duration) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self { client, retry, bearer })
    }

    fn send(&self, req: reqwest::blocking::RequestBuilder) -> Result<Vec<u8>, BackendError> {
        let req = match &self.bearer {
            Some(token) => req.bearer_auth(token),
            None => req,
        };
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp.bytes().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                code: status.as_u16(),
                body: String::from_utf8_lossy(&body).chars().take(500).collect(),
            });
        }
        Ok(body.to_vec())
    }

    pub fn post_json<B: Serialize>(&self, url: &str, body: &B) -> Result<Vec<u8>, BackendError> {
        let payload = serde_json::to_vec(body).map_err(|e| BackendError::Decode(e.to_string()))?;
        self.retry.run(|_| {
            self.send(
                self.client
                    .post(url)
                    .header("content-type", "application/json")
                    .body(payload.clone()),
            )
        })
    }

    pub fn post_bytes(&self, url: &str, bytes: &[u8], content_type: &str) -> Result<Vec<u8>, BackendError> {
        self.retry.run(|_| {
            self.send(
                self.client
                    .post(url)
                    .header("content-type", content_type)
                    .body(bytes.to_vec()),
            )
        })
    }

    pub fn get(&self, url: &str) -> Result<Vec<u8>, BackendError> {
        self.retry.run(|_| self.send(self.client.get(url)))
    }
}

/// Joins a base endpoint and a path without doubling slashes.
pub fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

/// Applies `f` to every item with at most `max_in_flight` calls running at
/// once. Results come back in input order.
pub fn parallel_map<T, R, F>(items: &[T], max_in_flight: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = max_in_flight.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect()
}
