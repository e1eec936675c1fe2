//! OpenAI-compatible chat client for real target models.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::Semaphore;
use tracing::{debug, warn};

use resroute_core::vlm::{DecodeParams, VlmClient, VlmError, VlmRequest, VlmResponse};

use crate::openai;

fn default_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    2
}
fn default_backoff() -> f64 {
    1.0
}
fn default_max_tokens() -> u32 {
    128
}
fn default_connections() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VlmEndpoint {
    /// Prefix of the API, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    /// Extra attempts after the first on transient failures.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// First backoff delay; doubles on every retry.
    #[serde(default = "default_backoff")]
    pub backoff_base_s: f64,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_connections")]
    pub max_connections: usize,
}

impl VlmEndpoint {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        VlmEndpoint {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            timeout_s: default_timeout(),
            max_retries: default_retries(),
            backoff_base_s: default_backoff(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            max_connections: default_connections(),
        }
    }

    pub fn decode(&self) -> DecodeParams {
        DecodeParams { temperature: self.temperature, max_tokens: self.max_tokens }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(format!("base_url `{}` must be http(s)", self.base_url));
        }
        if !(self.timeout_s > 0.0) {
            return Err("timeout_s must be positive".into());
        }
        if self.backoff_base_s < 0.0 {
            return Err("backoff_base_s must be non-negative".into());
        }
        if self.max_connections == 0 {
            return Err("max_connections must be at least 1".into());
        }
        Ok(())
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path.trim_start_matches('/'))
    }
}

pub struct HttpVlmClient {
    endpoint: VlmEndpoint,
    http: reqwest::Client,
    token: Option<String>,
    connections: Semaphore,
    attempts: AtomicU64,
}

impl HttpVlmClient {
    /// Reads the bearer token from the configured environment variable, if any.
    pub fn new(endpoint: VlmEndpoint) -> Result<Self, VlmError> {
        endpoint.validate().map_err(VlmError::Protocol)?;
        let token = match &endpoint.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| VlmError::Protocol(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(endpoint.timeout_s))
            .build()
            .map_err(|e| VlmError::Transport(e.to_string()))?;
        let connections = Semaphore::new(endpoint.max_connections);
        Ok(HttpVlmClient { endpoint, http, token, connections, attempts: AtomicU64::new(0) })
    }

    pub fn endpoint(&self) -> &VlmEndpoint {
        &self.endpoint
    }

    /// HTTP attempts made so far, retries included.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    async fn attempt(&self, path: &str, body: &Value) -> Result<Value, VlmError> {
        self.attempts.fetch_add(1, Ordering::Relaxed);
        let mut req = self.http.post(self.endpoint.url(path)).json(body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().await.map_err(|e| self.classify(e))?;
        let status = resp.status();
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(VlmError::AuthRejected(status.as_u16()));
        }
        let text = resp.text().await.map_err(|e| self.classify(e))?;
        if status.is_server_error() || status == reqwest::StatusCode::TOO_MANY_REQUESTS {
            return Err(VlmError::Transport(format!("HTTP {status}: {}", snippet(&text))));
        }
        if !status.is_success() {
            return Err(VlmError::Protocol(format!("HTTP {status}: {}", snippet(&text))));
        }
        serde_json::from_str(&text).map_err(|e| VlmError::Protocol(format!("response is not JSON: {e}")))
    }

    fn classify(&self, e: reqwest::Error) -> VlmError {
        if e.is_timeout() {
            VlmError::Timeout(self.endpoint.timeout_s)
        } else {
            VlmError::Transport(e.to_string())
        }
    }

    /// POSTs `body` to `path`, retrying transient failures with exponential backoff.
    pub async fn post_json(&self, path: &str, body: &Value) -> Result<Value, VlmError> {
        let _permit = self.connections.acquire().await.map_err(|e| VlmError::Transport(e.to_string()))?;
        let mut delay = self.endpoint.backoff_base_s;
        let mut attempt = 0;
        loop {
            match self.attempt(path, body).await {
                Err(e) if e.is_transient() && attempt < self.endpoint.max_retries => {
                    warn!(attempt, error = %e, delay_s = delay, "retrying model call");
                    tokio::time::sleep(Duration::from_secs_f64(delay)).await;
                    delay *= 2.0;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    /// Forwards a complete chat-completions body and returns the raw response.
    pub async fn chat_raw(&self, mut body: Value) -> Result<Value, VlmError> {
        if body.get("model").is_none_or(Value::is_null) {
            body["model"] = Value::String(self.endpoint.model.clone());
        }
        self.post_json("chat/completions", &body).await
    }

    /// Whether the endpoint answers HTTP at all.
    pub async fn probe(&self) -> bool {
        let mut req = self.http.get(self.endpoint.url("models")).timeout(Duration::from_secs(5));
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        matches!(req.send().await, Ok(r) if !r.status().is_server_error())
    }
}

fn snippet(text: &str) -> &str {
    let end = text.char_indices().nth(200).map_or(text.len(), |(i, _)| i);
    &text[..end]
}

#[async_trait]
impl VlmClient for HttpVlmClient {
    async fn chat(&self, req: &VlmRequest) -> Result<VlmResponse, VlmError> {
        let started = Instant::now();
        let body = openai::chat_body(&self.endpoint.model, &req.image_bytes, &req.query, req.decode);
        let raw = self.post_json("chat/completions", &body).await?;
        let (answer, usage) = openai::parse_answer(&raw).map_err(VlmError::Protocol)?;
        let latency_ms = started.elapsed().as_secs_f64() * 1e3;
        debug!(latency_ms, "model answered");
        Ok(VlmResponse { answer, usage, latency_ms })
    }
}
