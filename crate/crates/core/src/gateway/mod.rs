//! Single access point to chat-completion backends.
//!
//! A [`Gateway`] wraps one [`ChatBackend`] (the OpenAI-compatible HTTP
//! client, the hash-keyed mock, or a test double) and adds the retry policy
//! and the in-flight bound shared by every caller.

mod http;
mod mock;
mod prompt;

use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, API_KEY_ENV};
pub use mock::{request_hash, MockBackend};
pub use prompt::{
    build_extract_prompt, build_reader_prompt, render_template, PromptTemplate, PromptTemplates,
    TemplateError, INSUFFICIENT_INFORMATION, QUOTE_GROUNDING_INSTRUCTION,
};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("request timed out")]
    Timeout,
    #[error("http status {0}")]
    HttpStatus(u16),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        #[source]
        last: Box<GatewayError>,
    },
    #[error("mock backend has no response for request {0}")]
    Unscripted(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

impl GatewayError {
    /// Transport failures and 5xx responses are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Timeout | GatewayError::Transport(_) => true,
            GatewayError::HttpStatus(code) => *code >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// Body of `POST {base_url}/chat/completions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        match self.messages.first() {
            None => Err(GatewayError::InvalidRequest("no messages".into())),
            Some(m) if m.role != Role::System => Err(GatewayError::InvalidRequest(
                "first message must have role system".into(),
            )),
            Some(_) => Ok(()),
        }
    }

    pub fn user_content(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    pub fn system_content(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
    }
}

/// One round trip to a completion service. Retries and concurrency limits
/// are applied by [`Gateway`], not by implementors.
pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &CompletionRequest) -> Result<String, GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub model: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub max_concurrency: usize,
    pub initial_backoff_ms: u64,
    /// JSON map of request hash to response text (mock only).
    pub mock_script: Option<PathBuf>,
    /// Returned by the mock for requests missing from the script.
    pub mock_fallback: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            base_url: None,
            model: "casc-reader".into(),
            timeout_ms: 30_000,
            max_retries: 3,
            max_concurrency: 4,
            initial_backoff_ms: 250,
            mock_script: None,
            mock_fallback: None,
        }
    }
}

impl BackendConfig {
    /// Returns the name of the first invalid field.
    pub fn invalid_field(&self) -> Option<&'static str> {
        if self.max_concurrency < 1 {
            return Some("backend.max_concurrency");
        }
        if self.timeout_ms == 0 {
            return Some("backend.timeout_ms");
        }
        if self.kind == BackendKind::Http && self.base_url.as_deref().is_none_or(str::is_empty) {
            return Some("backend.base_url");
        }
        None
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

/// Counting semaphore bounding in-flight backend calls.
struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Shareable across threads; clone the `Arc` it lives in.
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    limiter: Limiter,
    max_retries: u32,
    initial_backoff: Duration,
    model: String,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("max_concurrency", &self.limiter.max)
            .field("max_retries", &self.max_retries)
            .field("model", &self.model)
            .finish()
    }
}

impl Gateway {
    pub fn with_backend(backend: Arc<dyn ChatBackend>, config: &BackendConfig) -> Self {
        Self {
            backend,
            limiter: Limiter::new(config.max_concurrency),
            max_retries: config.max_retries,
            initial_backoff: Duration::from_millis(config.initial_backoff_ms),
            model: config.model.clone(),
        }
    }

    /// Builds the backend named by `config.kind`. The HTTP backend reads its
    /// bearer token from `CASC_API_KEY`.
    pub fn from_config(config: &BackendConfig) -> Result<Self, GatewayError> {
        if let Some(field) = config.invalid_field() {
            return Err(GatewayError::Config(format!("invalid {field}")));
        }
        let backend: Arc<dyn ChatBackend> = match config.kind {
            BackendKind::Mock => {
                let mut mock = match &config.mock_script {
                    Some(path) => MockBackend::from_file(path)?,
                    None => MockBackend::new(),
                };
                if let Some(fallback) = &config.mock_fallback {
                    mock = mock.with_fallback(fallback.clone());
                }
                Arc::new(mock)
            }
            BackendKind::Http => {
                let base_url = config.base_url.as_deref().unwrap_or_default();
                Arc::new(HttpBackend::from_env(base_url, config.timeout())?)
            }
        };
        Ok(Self::with_backend(backend, config))
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    /// Sends `request`, retrying transport errors and 5xx responses with
    /// exponential backoff. A permit is held only while a call is in flight,
    /// never during backoff.
    pub fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let mut attempt: u32 = 0;
        loop {
            let result = {
                let _permit = self.limiter.acquire();
                self.backend.send(request)
            };
            match result {
                Ok(text) => return Ok(text),
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    std::thread::sleep(self.initial_backoff.saturating_mul(1 << attempt.min(16)));
                    attempt += 1;
                }
                Err(e) if e.is_retryable() && self.max_retries > 0 => {
                    return Err(GatewayError::RetriesExhausted {
                        attempts: attempt + 1,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn request(user: &str) -> CompletionRequest {
        CompletionRequest {
            model: "m".into(),
            messages: vec![
                ChatMessage {
                    role: Role::System,
                    content: "sys".into(),
                },
                ChatMessage {
                    role: Role::User,
                    content: user.into(),
                },
            ],
            temperature: 0.0,
            max_tokens: 16,
        }
    }

    struct Flaky {
        failures: Vec<GatewayError>,
        calls: AtomicUsize,
    }

    impl ChatBackend for Flaky {
        fn send(&self, _: &CompletionRequest) -> Result<String, GatewayError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            match self.failures.get(n) {
                Some(GatewayError::HttpStatus(c)) => Err(GatewayError::HttpStatus(*c)),
                Some(GatewayError::Timeout) => Err(GatewayError::Timeout),
                Some(_) => Err(GatewayError::MalformedResponse("x".into())),
                None => Ok("ok".into()),
            }
        }
    }

    fn config(retries: u32) -> BackendConfig {
        BackendConfig {
            max_retries: retries,
            initial_backoff_ms: 1,
            ..Default::default()
        }
    }

    #[test]
    fn retries_then_succeeds() {
        let backend = Arc::new(Flaky {
            failures: vec![GatewayError::HttpStatus(500), GatewayError::HttpStatus(503)],
            calls: AtomicUsize::new(0),
        });
        let gw = Gateway::with_backend(backend.clone(), &config(2));
        assert_eq!(gw.complete(&request("q")).unwrap(), "ok");
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausts_retries() {
        let backend = Arc::new(Flaky {
            failures: (0..5).map(|_| GatewayError::HttpStatus(502)).collect(),
            calls: AtomicUsize::new(0),
        });
        let gw = Gateway::with_backend(backend, &config(2));
        match gw.complete(&request("q")) {
            Err(GatewayError::RetriesExhausted { attempts, last }) => {
                assert_eq!(attempts, 3);
                assert!(matches!(*last, GatewayError::HttpStatus(502)));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn no_retry_on_client_errors_or_malformed() {
        for failure in [GatewayError::HttpStatus(404), GatewayError::MalformedResponse(String::new())] {
            let backend = Arc::new(Flaky {
                failures: vec![failure],
                calls: AtomicUsize::new(0),
            });
            let gw = Gateway::with_backend(backend.clone(), &config(3));
            assert!(gw.complete(&request("q")).is_err());
            assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
        }
    }

    #[test]
    fn timeout_surfaces_without_retries() {
        let backend = Arc::new(Flaky {
            failures: vec![GatewayError::Timeout],
            calls: AtomicUsize::new(0),
        });
        let gw = Gateway::with_backend(backend, &config(0));
        assert!(matches!(gw.complete(&request("q")), Err(GatewayError::Timeout)));
    }

    #[test]
    fn rejects_requests_without_leading_system_message() {
        let gw = Gateway::with_backend(Arc::new(MockBackend::new()), &config(0));
        let mut req = request("q");
        req.messages.remove(0);
        assert!(matches!(gw.complete(&req), Err(GatewayError::InvalidRequest(_))));
        req.messages.clear();
        assert!(matches!(gw.complete(&req), Err(GatewayError::InvalidRequest(_))));
    }

    struct Counting {
        current: AtomicUsize,
        peak: AtomicUsize,
    }

    impl ChatBackend for Counting {
        fn send(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok(request.user_content().unwrap_or_default().to_string())
        }
    }

    #[test]
    fn in_flight_never_exceeds_limit() {
        let backend = Arc::new(Counting {
            current: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let cfg = BackendConfig {
            max_concurrency: 3,
            ..config(0)
        };
        let gw = Arc::new(Gateway::with_backend(backend.clone(), &cfg));
        std::thread::scope(|s| {
            for i in 0..24 {
                let gw = gw.clone();
                s.spawn(move || {
                    let user = format!("q{i}");
                    assert_eq!(gw.complete(&request(&user)).unwrap(), user);
                });
            }
        });
        assert!(backend.peak.load(Ordering::SeqCst) <= 3);
        assert!(backend.peak.load(Ordering::SeqCst) >= 2);
    }

    #[test]
    fn config_validation() {
        assert_eq!(BackendConfig::default().invalid_field(), None);
        let zero = BackendConfig {
            max_concurrency: 0,
            ..Default::default()
        };
        assert_eq!(zero.invalid_field(), Some("backend.max_concurrency"));
        let http = BackendConfig {
            kind: BackendKind::Http,
            ..Default::default()
        };
        assert_eq!(http.invalid_field(), Some("backend.base_url"));
    }
}
