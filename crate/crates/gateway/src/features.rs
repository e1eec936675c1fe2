//! Client for the feature service that embeds a low-resolution view plus query.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

fn default_timeout() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureEndpoint {
    /// Service root, e.g. `http://localhost:9000`.
    pub url: String,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

impl FeatureEndpoint {
    pub fn new(url: impl Into<String>) -> Self {
        FeatureEndpoint { url: url.into(), timeout_s: default_timeout() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureHandshake {
    pub backbone: String,
    pub layer: u32,
    pub dim: usize,
    #[serde(default)]
    pub max_input_side: Option<u32>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("feature service unavailable: {0}")]
    Unavailable(String),
    #[error("feature service protocol error: {0}")]
    Protocol(String),
    #[error("feature vector has {got} entries, expected {expected}")]
    DimMismatch { got: usize, expected: usize },
}

#[derive(Deserialize)]
struct FeatureResponse {
    vector: Vec<f64>,
}

#[derive(Clone)]
pub struct FeatureClient {
    endpoint: FeatureEndpoint,
    http: reqwest::Client,
}

impl FeatureClient {
    pub fn new(endpoint: FeatureEndpoint) -> Result<Self, FeatureError> {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(endpoint.timeout_s))
            .build()
            .map_err(|e| FeatureError::Unavailable(e.to_string()))?;
        Ok(FeatureClient { endpoint, http })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.endpoint.url.trim_end_matches('/'), path)
    }

    async fn read<T: serde::de::DeserializeOwned>(resp: reqwest::Response) -> Result<T, FeatureError> {
        let status = resp.status();
        if status.is_server_error() {
            return Err(FeatureError::Unavailable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().await.unwrap_or_default();
            return Err(FeatureError::Protocol(format!("HTTP {status}: {text}")));
        }
        let bytes = resp.bytes().await.map_err(|e| FeatureError::Unavailable(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| FeatureError::Protocol(e.to_string()))
    }

    pub async fn handshake(&self) -> Result<FeatureHandshake, FeatureError> {
        let resp = self.http.get(self.url("handshake")).send().await.map_err(|e| FeatureError::Unavailable(e.to_string()))?;
        Self::read(resp).await
    }

    /// Embeds `image` (already at the cheap-pass size) together with `query`.
    pub async fn features(&self, image: &[u8], query: &str, expected_dim: usize) -> Result<Vec<f64>, FeatureError> {
        let body = json!({"image_b64": STANDARD.encode(image), "query": query});
        let resp = self
            .http
            .post(self.url("features"))
            .json(&body)
            .send()
            .await
            .map_err(|e| FeatureError::Unavailable(e.to_string()))?;
        let out: FeatureResponse = Self::read(resp).await?;
        if out.vector.len() != expected_dim {
            return Err(FeatureError::DimMismatch { got: out.vector.len(), expected: expected_dim });
        }
        if out.vector.iter().any(|x| !x.is_finite()) {
            return Err(FeatureError::Protocol("non-finite feature value".into()));
        }
        Ok(out.vector)
    }

    pub async fn probe(&self) -> bool {
        let req = self.http.get(self.url("healthz")).timeout(Duration::from_secs(5));
        matches!(req.send().await, Ok(r) if r.status().is_success())
    }
}
