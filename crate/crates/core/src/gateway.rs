//! Client for an external chat-completion service, with retry, an
//! in-flight admission bound, and a deterministic scripted mock
//! transport for tests and reproducible pipeline runs.
//!
//! The wire format follows the de-facto chat-completions shape so any
//! compatible endpoint can stand in for the annotator and judge models.

use std::env;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(skip_serializing)]
    pub request_id: String,
}

impl ChatRequest {
    pub fn user(model: impl Into<String>, prompt: impl Into<String>, request_id: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            messages: vec![ChatMessage {
                role: Role::User,
                content: prompt.into(),
            }],
            temperature: 0.0,
            max_tokens: 4096,
            request_id: request_id.into(),
        }
    }

    /// Content of the last user message, used by the scripted mock for
    /// rule matching.
    pub fn last_user_content(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

/// A single transport attempt outcome.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportFault {
    /// Retryable: timeouts, connection resets, 5xx-equivalents.
    #[error("transient: {0}")]
    Transient(String),
    /// Not retryable: 4xx-equivalents, unusable configuration.
    #[error("permanent: {0}")]
    Permanent(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("permanent transport failure: {0}")]
    Permanent(String),
    #[error("transport failed after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportFault>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportFault> {
        (**self).send(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    pub model: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    /// Base backoff in milliseconds; attempt n sleeps base * 2^(n-1).
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

fn default_api_key_env() -> String {
    "RNER_API_KEY".to_string()
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_max_in_flight() -> usize {
    4
}
fn default_max_attempts() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    1000
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            api_key_env: default_api_key_env(),
            model: "mock".to_string(),
            timeout_secs: default_timeout_secs(),
            max_in_flight: default_max_in_flight(),
            max_attempts: default_max_attempts(),
            backoff_base_ms: default_backoff_ms(),
        }
    }
}

/// Counting gate bounding the number of concurrent requests.
struct AdmissionGate {
    in_flight: Mutex<usize>,
    released: Condvar,
    limit: usize,
}

impl AdmissionGate {
    fn new(limit: usize) -> Self {
        Self {
            in_flight: Mutex::new(0),
            released: Condvar::new(),
            limit: limit.max(1),
        }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut count = self.in_flight.lock().unwrap();
        while *count >= self.limit {
            count = self.released.wait(count).unwrap();
        }
        *count += 1;
        GatePermit { gate: self }
    }
}

struct GatePermit<'a> {
    gate: &'a AdmissionGate,
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut count = self.gate.in_flight.lock().unwrap();
        *count -= 1;
        self.gate.released.notify_one();
    }
}

pub struct Gateway<T: Transport> {
    transport: T,
    config: GatewayConfig,
    gate: AdmissionGate,
}

impl<T: Transport> Gateway<T> {
    pub fn new(transport: T, config: GatewayConfig) -> Self {
        let gate = AdmissionGate::new(config.max_in_flight);
        Self { transport, config, gate }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    /// Send a request, retrying transient faults with exponential
    /// backoff up to `max_attempts`. Permanent faults are not retried.
    pub fn chat_complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let _permit = self.gate.acquire();
        let mut last = String::new();
        for attempt in 1..=self.config.max_attempts {
            match self.transport.send(request) {
                Ok(reply) => return Ok(reply),
                Err(TransportFault::Permanent(msg)) => return Err(GatewayError::Permanent(msg)),
                Err(TransportFault::Transient(msg)) => {
                    last = msg;
                    if attempt < self.config.max_attempts {
                        let backoff = self.config.backoff_base_ms << (attempt - 1);
                        std::thread::sleep(Duration::from_millis(backoff));
                    }
                }
            }
        }
        Err(GatewayError::RetriesExhausted {
            attempts: self.config.max_attempts,
            last,
        })
    }
}

/// One scripted rule: reply fires when `matches` occurs as a substring
/// of the last user message. First matching rule wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub matches: String,
    pub reply: String,
}

/// Deterministic scripted transport: identical requests always produce
/// identical replies.
#[derive(Debug, Clone, Default)]
pub struct MockTransport {
    rules: Vec<MockRule>,
}

impl MockTransport {
    pub fn new(rules: Vec<MockRule>) -> Self {
        Self { rules }
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(json)?))
    }
}

impl Transport for MockTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportFault> {
        let content = request
            .last_user_content()
            .ok_or_else(|| TransportFault::Permanent("no user message".to_string()))?;
        self.rules
            .iter()
            .find(|rule| content.contains(&rule.matches))
            .map(|rule| rule.reply.clone())
            .ok_or_else(|| TransportFault::Permanent(format!("no mock rule matches request {}", request.request_id)))
    }
}

/// Live HTTP transport speaking the chat-completions wire format.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
}

#[derive(Deserialize)]
struct ChatCompletionReply {
    choices: Vec<ChatCompletionChoice>,
}

#[derive(Deserialize)]
struct ChatCompletionChoice {
    message: ChatMessage,
}

impl HttpTransport {
    pub fn new(config: &GatewayConfig) -> Result<Self, TransportFault> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| TransportFault::Permanent(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: config.endpoint.clone(),
            api_key: env::var(&config.api_key_env).ok(),
        })
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &ChatRequest) -> Result<String, TransportFault> {
        let mut builder = self.client.post(&self.endpoint).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .map_err(|e| TransportFault::Transient(e.to_string()))?;
        let status = response.status();
        if status.is_client_error() {
            return Err(TransportFault::Permanent(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(TransportFault::Transient(format!("status {status}")));
        }
        let reply: ChatCompletionReply = response
            .json()
            .map_err(|e| TransportFault::Transient(e.to_string()))?;
        reply
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| TransportFault::Transient("empty choices".to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
    use std::sync::Arc;

    fn fast_config() -> GatewayConfig {
        GatewayConfig {
            backoff_base_ms: 0,
            ..GatewayConfig::default()
        }
    }

    struct FlakyTransport {
        failures: u32,
        attempts: AtomicU32,
    }

    impl Transport for FlakyTransport {
        fn send(&self, _request: &ChatRequest) -> Result<String, TransportFault> {
            let n = self.attempts.fetch_add(1, Ordering::SeqCst) + 1;
            if n <= self.failures {
                Err(TransportFault::Transient(format!("attempt {n} failed")))
            } else {
                Ok("ok".to_string())
            }
        }
    }

    #[test]
    fn mock_echo() {
        let transport = MockTransport::new(vec![MockRule {
            matches: "hello".to_string(),
            reply: "hello back".to_string(),
        }]);
        let gateway = Gateway::new(transport, fast_config());
        let req = ChatRequest::user("mock", "say hello please", "r1");
        assert_eq!(gateway.chat_complete(&req).unwrap(), "hello back");
    }

    #[test]
    fn mock_no_rule_is_permanent() {
        let gateway = Gateway::new(MockTransport::default(), fast_config());
        let req = ChatRequest::user("mock", "anything", "r1");
        assert!(matches!(gateway.chat_complete(&req), Err(GatewayError::Permanent(_))));
    }

    #[test]
    fn retries_then_succeeds() {
        let transport = FlakyTransport {
            failures: 2,
            attempts: AtomicU32::new(0),
        };
        let gateway = Gateway::new(transport, fast_config());
        let req = ChatRequest::user("mock", "x", "r1");
        assert_eq!(gateway.chat_complete(&req).unwrap(), "ok");
        assert_eq!(gateway.transport.attempts.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_exhausted() {
        let transport = FlakyTransport {
            failures: 5,
            attempts: AtomicU32::new(0),
        };
        let gateway = Gateway::new(transport, fast_config());
        let req = ChatRequest::user("mock", "x", "r1");
        match gateway.chat_complete(&req) {
            Err(GatewayError::RetriesExhausted { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected: {other:?}"),
        }
    }

    struct CountingTransport {
        current: Arc<AtomicUsize>,
        peak: Arc<AtomicUsize>,
    }

    impl Transport for CountingTransport {
        fn send(&self, _request: &ChatRequest) -> Result<String, TransportFault> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok("ok".to_string())
        }
    }

    #[test]
    fn in_flight_bound_is_enforced() {
        let current = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let transport = CountingTransport {
            current: current.clone(),
            peak: peak.clone(),
        };
        let config = GatewayConfig {
            max_in_flight: 2,
            backoff_base_ms: 0,
            ..GatewayConfig::default()
        };
        let gateway = Arc::new(Gateway::new(transport, config));
        std::thread::scope(|scope| {
            for i in 0..16 {
                let gateway = gateway.clone();
                scope.spawn(move || {
                    let req = ChatRequest::user("mock", "x", format!("r{i}"));
                    gateway.chat_complete(&req).unwrap();
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
