//! Model gateways: the aligned image/text encoder and the multimodal chat
//! model, each with a remote HTTP client and a deterministic mock.

pub mod encoder;
pub mod vlm;

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::embedding::EmbeddingError;
use crate::image::ImageError;

pub use encoder::{
    build_encoder, CachedEncoder, Encoder, EncoderBackendConfig, MockEncoder, RemoteEncoder,
};
pub use vlm::{
    build_vlm, two_way_softmax, yes_no_probability, ChatRequest, ChatResponse, MockVlm,
    RemoteVlm, ScriptedTurn, TurnMatcher, Vlm, VlmBackendConfig, YesNo, YesNoMode, YesNoOutcome,
};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend unavailable after {attempts} attempt(s): {last_error}")]
    BackendUnavailable { attempts: u32, last_error: String },
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("embedding dimension mismatch: configured {expected}, backend returned {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("response truncated at max_tokens")]
    ResponseTruncated,
    #[error("no scripted turn matches prompt {prompt_prefix:?} with images {images:?}")]
    ScriptMiss {
        prompt_prefix: String,
        images: Vec<String>,
    },
    #[error("{count} scripted turns match prompt {prompt_prefix:?}; expected exactly one")]
    ScriptAmbiguous { prompt_prefix: String, count: usize },
    #[error("neither a yes nor a no answer could be found: {0:?}")]
    AnswerUnparseable(String),
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl From<EmbeddingError> for GatewayError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::DimensionMismatch { expected, actual } => {
                GatewayError::DimensionMismatch { expected, actual }
            }
            other => GatewayError::MalformedResponse(other.to_string()),
        }
    }
}

/// Which implementation backs a gateway.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Remote,
    #[default]
    Mock,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "remote" => Ok(BackendKind::Remote),
            "mock" => Ok(BackendKind::Mock),
            other => Err(format!("unknown backend {other:?} (expected mock or remote)")),
        }
    }
}

/// Counting semaphore capping concurrent in-flight requests.
#[derive(Debug)]
pub struct InflightLimiter {
    available: Mutex<usize>,
    freed: Condvar,
}

pub struct InflightPermit<'a> {
    limiter: &'a InflightLimiter,
}

impl InflightLimiter {
    pub fn new(max_in_flight: usize) -> Self {
        Self {
            available: Mutex::new(max_in_flight.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InflightPermit<'_> {
        let mut n = self.available.lock().expect("limiter poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n -= 1;
        InflightPermit { limiter: self }
    }
}

impl Drop for InflightPermit<'_> {
    fn drop(&mut self) {
        *self.limiter.available.lock().expect("limiter poisoned") += 1;
        self.limiter.freed.notify_one();
    }
}

/// Exponential backoff with full jitter.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
        }
    }
}

/// Outcome of one attempt inside [`RetryPolicy::run`].
pub enum Attempt<T> {
    Done(T),
    Retry(String),
    Fail(GatewayError),
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let cap = self
            .base_delay
            .saturating_mul(1u32 << attempt.min(16))
            .min(self.max_delay);
        let millis = cap.as_millis() as u64;
        if millis == 0 {
            return Duration::ZERO;
        }
        Duration::from_millis(rand::rng().random_range(0..=millis))
    }

    pub fn run<T>(&self, mut op: impl FnMut() -> Attempt<T>) -> Result<T, GatewayError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match op() {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(msg) => {
                    if attempts > self.max_retries {
                        return Err(GatewayError::BackendUnavailable {
                            attempts,
                            last_error: msg,
                        });
                    }
                    log::warn!("backend attempt {attempts} failed: {msg}; retrying");
                    std::thread::sleep(self.delay(attempts - 1));
                }
            }
        }
    }
}

/// Minimal blocking JSON-over-HTTP client shared by the remote backends.
pub(crate) struct HttpJson {
    agent: ureq::Agent,
    bearer: Option<String>,
    retry: RetryPolicy,
    limiter: InflightLimiter,
}

impl HttpJson {
    pub(crate) fn new(
        timeout: Duration,
        api_key_env: Option<&str>,
        retry: RetryPolicy,
        max_in_flight: usize,
    ) -> Result<Self, GatewayError> {
        let bearer = match api_key_env {
            Some(var) if !var.is_empty() => Some(std::env::var(var).map_err(|_| {
                GatewayError::Config(format!("api key environment variable {var} is not set"))
            })?),
            _ => None,
        };
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Ok(Self {
            agent: ureq::Agent::new_with_config(config),
            bearer,
            retry,
            limiter: InflightLimiter::new(max_in_flight),
        })
    }

    pub(crate) fn post(&self, url: &str, body: &Value) -> Result<Value, GatewayError> {
        let _permit = self.limiter.acquire();
        self.retry.run(|| {
            let mut req = self.agent.post(url).header("Content-Type", "application/json");
            if let Some(key) = &self.bearer {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let mut resp = match req.send_json(body) {
                Ok(r) => r,
                Err(e) => return Attempt::Retry(e.to_string()),
            };
            let status = resp.status().as_u16();
            let text = match resp.body_mut().read_to_string() {
                Ok(t) => t,
                Err(e) => return Attempt::Retry(e.to_string()),
            };
            if status == 429 || status >= 500 {
                return Attempt::Retry(format!("HTTP {status}"));
            }
            if !(200..300).contains(&status) {
                return Attempt::Fail(GatewayError::Http { status, body: text });
            }
            match serde_json::from_str(&text) {
                Ok(v) => Attempt::Done(v),
                Err(e) => Attempt::Fail(GatewayError::MalformedResponse(format!(
                    "response is not JSON: {e}"
                ))),
            }
        })
    }
}

pub(crate) fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn retry_gives_up_after_max() {
        let policy = RetryPolicy {
            max_retries: 2,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        };
        let calls = AtomicUsize::new(0);
        let err = policy
            .run::<()>(|| {
                calls.fetch_add(1, Ordering::SeqCst);
                Attempt::Retry("down".into())
            })
            .unwrap_err();
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        assert!(matches!(err, GatewayError::BackendUnavailable { attempts: 3, .. }));
    }

    #[test]
    fn retry_recovers() {
        let policy = RetryPolicy {
            max_retries: 3,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        };
        let mut n = 0;
        let v = policy
            .run(|| {
                n += 1;
                if n < 3 {
                    Attempt::Retry("flaky".into())
                } else {
                    Attempt::Done(n)
                }
            })
            .unwrap();
        assert_eq!(v, 3);
    }

    #[test]
    fn limiter_caps_concurrency() {
        let limiter = Arc::new(InflightLimiter::new(2));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..8 {
                let (limiter, active, peak) = (limiter.clone(), active.clone(), peak.clone());
                s.spawn(move || {
                    let _p = limiter.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    active.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn url_join() {
        assert_eq!(join_url("http://h/v1/", "/embeddings"), "http://h/v1/embeddings");
        assert_eq!(join_url("http://h/v1", "chat/completions"), "http://h/v1/chat/completions");
    }
}
