//! In-process HTTP stand-ins for the target model and the feature service,
//! with failure injection. Used by tests and for local dry runs.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::sync::oneshot;

use resroute_core::cost::estimate_text_tokens;
use resroute_core::imageops::{self, ImageDims};
use resroute_core::synth::FeatureLine;
use resroute_core::vlm::{SimulatedVlm, Usage};

use crate::features::FeatureHandshake;
use crate::openai::{self, ImageSource};

/// A running stub; the server stops when this is dropped.
pub struct StubServer<S> {
    pub addr: SocketAddr,
    pub state: Arc<S>,
    _stop: oneshot::Sender<()>,
}

impl<S> StubServer<S> {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

async fn spawn<S: Send + Sync + 'static>(router: Router, state: Arc<S>) -> std::io::Result<StubServer<S>> {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    tokio::spawn(async move {
        let _ = axum::serve(listener, router)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    Ok(StubServer { addr, state, _stop: tx })
}

/// Tracks concurrent requests and their peak.
#[derive(Default)]
pub struct Concurrency {
    now: AtomicUsize,
    peak: AtomicUsize,
}

impl Concurrency {
    fn enter(&self) -> ConcurrencyGuard<'_> {
        let n = self.now.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(n, Ordering::SeqCst);
        ConcurrencyGuard(self)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

struct ConcurrencyGuard<'a>(&'a Concurrency);

impl Drop for ConcurrencyGuard<'_> {
    fn drop(&mut self) {
        self.0.now.fetch_sub(1, Ordering::SeqCst);
    }
}

/// What the stub model does with each request.
#[derive(Debug, Clone, Default)]
pub struct VlmBehavior {
    /// Answer this many requests with HTTP 500 before behaving.
    pub fail_first: usize,
    /// Reply 200 with a body that is not a chat completion.
    pub malformed: bool,
    /// Reject requests without this bearer token.
    pub require_token: Option<String>,
    pub delay: Duration,
    /// Report every endpoint as failing.
    pub down: bool,
}

pub struct StubVlmState {
    sim: Option<SimulatedVlm>,
    behavior: Mutex<VlmBehavior>,
    pub hits: AtomicUsize,
    pub concurrency: Concurrency,
    /// Dimensions of every image received, in arrival order.
    pub received: Mutex<Vec<ImageDims>>,
}

impl StubVlmState {
    pub fn set_behavior(&self, b: VlmBehavior) {
        *self.behavior.lock().expect("behavior lock") = b;
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

/// OpenAI-compatible model under `<url>/v1`. Answers from the simulator when
/// given one (sample resolved by query text), otherwise echoes "OK".
pub async fn spawn_vlm(sim: Option<SimulatedVlm>, behavior: VlmBehavior) -> std::io::Result<StubServer<StubVlmState>> {
    let state = Arc::new(StubVlmState {
        sim,
        behavior: Mutex::new(behavior),
        hits: AtomicUsize::new(0),
        concurrency: Concurrency::default(),
        received: Mutex::new(Vec::new()),
    });
    let router = Router::new()
        .route("/v1/chat/completions", post(vlm_chat))
        .route("/v1/models", get(vlm_models))
        .with_state(state.clone());
    spawn(router, state).await
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({"error": {"message": message.into()}}))).into_response()
}

async fn vlm_models(State(s): State<Arc<StubVlmState>>) -> Response {
    if s.behavior.lock().expect("behavior lock").down {
        return error(StatusCode::SERVICE_UNAVAILABLE, "down");
    }
    Json(json!({"object": "list", "data": [{"id": "simulated", "object": "model"}]})).into_response()
}

async fn vlm_chat(State(s): State<Arc<StubVlmState>>, headers: HeaderMap, body: Bytes) -> Response {
    let hit = s.hits.fetch_add(1, Ordering::SeqCst);
    let _g = s.concurrency.enter();
    let b = s.behavior.lock().expect("behavior lock").clone();
    if !b.delay.is_zero() {
        tokio::time::sleep(b.delay).await;
    }
    if b.down || hit < b.fail_first {
        return error(StatusCode::INTERNAL_SERVER_ERROR, "injected failure");
    }
    if let Some(token) = &b.require_token {
        let want = format!("Bearer {token}");
        if headers.get("authorization").and_then(|v| v.to_str().ok()) != Some(want.as_str()) {
            return error(StatusCode::UNAUTHORIZED, "bad token");
        }
    }
    if b.malformed {
        return (StatusCode::OK, "{\"choices\": \"nope\"").into_response();
    }
    let Ok(body) = serde_json::from_slice::<Value>(&body) else {
        return error(StatusCode::BAD_REQUEST, "body is not JSON");
    };
    let at = match openai::find_image(&body) {
        Ok(Some(at)) => at,
        Ok(None) => return error(StatusCode::BAD_REQUEST, "no image part"),
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let ImageSource::Inline(bytes) = &at.source else {
        return error(StatusCode::BAD_REQUEST, "stub only accepts inline images");
    };
    let dims = match imageops::probe_dims(bytes) {
        Ok(d) => d,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    s.received.lock().expect("received lock").push(dims);
    let answer = match &s.sim {
        None => "OK".to_string(),
        Some(sim) => {
            let Some(id) = sim.resolve_id(None, &at.query) else {
                return error(StatusCode::BAD_REQUEST, format!("unknown query `{}`", at.query));
            };
            match sim.answer_at(id, dims.longest_side()) {
                Ok(a) => a,
                Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
            }
        }
    };
    let usage = Usage { prompt_tokens: estimate_text_tokens(&at.query), completion_tokens: estimate_text_tokens(&answer) };
    let model = body.get("model").and_then(Value::as_str).unwrap_or("simulated");
    Json(openai::completion_response(model, &answer, Some(usage))).into_response()
}

pub struct StubFeatureState {
    handshake: FeatureHandshake,
    by_query: HashMap<String, Vec<f64>>,
    pub down: AtomicBool,
    pub hits: AtomicUsize,
    /// Longest side of every image received.
    pub received_sides: Mutex<Vec<u32>>,
}

impl StubFeatureState {
    pub fn set_down(&self, down: bool) {
        self.down.store(down, Ordering::SeqCst);
    }
}

/// Deterministic pseudo-features for pairs with no stored vector.
pub fn hashed_features(image: &[u8], query: &str, dim: usize) -> Vec<f64> {
    let mut seed = Sha256::new();
    seed.update(image);
    seed.update(query.as_bytes());
    let seed = seed.finalize();
    (0..dim)
        .map(|i| {
            let mut h = Sha256::new();
            h.update(seed);
            h.update((i as u64).to_le_bytes());
            let d = h.finalize();
            let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
            (x as f64 / u64::MAX as f64) * 2.0 - 1.0
        })
        .collect()
}

/// Feature service that returns stored vectors by query text and hashed
/// vectors for anything else.
pub async fn spawn_features(dim: usize, lines: Vec<FeatureLine>) -> std::io::Result<StubServer<StubFeatureState>> {
    let by_query = lines
        .into_iter()
        .map(|l| {
            let v = l.features.decode::<f64>().map_err(|e| std::io::Error::other(e.to_string()))?;
            Ok((l.query, v))
        })
        .collect::<std::io::Result<_>>()?;
    let state = Arc::new(StubFeatureState {
        handshake: FeatureHandshake { backbone: "stub".into(), layer: 16, dim, max_input_side: Some(384) },
        by_query,
        down: AtomicBool::new(false),
        hits: AtomicUsize::new(0),
        received_sides: Mutex::new(Vec::new()),
    });
    let router = Router::new()
        .route("/features", post(features))
        .route("/handshake", get(handshake))
        .route("/healthz", get(feature_health))
        .with_state(state.clone());
    spawn(router, state).await
}

async fn handshake(State(s): State<Arc<StubFeatureState>>) -> Response {
    if s.down.load(Ordering::SeqCst) {
        return error(StatusCode::SERVICE_UNAVAILABLE, "loading");
    }
    Json(s.handshake.clone()).into_response()
}

async fn feature_health(State(s): State<Arc<StubFeatureState>>) -> Response {
    if s.down.load(Ordering::SeqCst) {
        return error(StatusCode::SERVICE_UNAVAILABLE, "down");
    }
    Json(json!({"status": "ok"})).into_response()
}

async fn features(State(s): State<Arc<StubFeatureState>>, body: Bytes) -> Response {
    s.hits.fetch_add(1, Ordering::SeqCst);
    if s.down.load(Ordering::SeqCst) {
        return error(StatusCode::SERVICE_UNAVAILABLE, "down");
    }
    let Ok(body) = serde_json::from_slice::<Value>(&body) else {
        return error(StatusCode::BAD_REQUEST, "body is not JSON");
    };
    let (Some(image), Some(query)) = (body.get("image_b64").and_then(Value::as_str), body.get("query").and_then(Value::as_str))
    else {
        return error(StatusCode::BAD_REQUEST, "image_b64 and query are required");
    };
    let Ok(image) = STANDARD.decode(image) else {
        return error(StatusCode::BAD_REQUEST, "image_b64 is not base64");
    };
    match imageops::probe_dims(&image) {
        Ok(d) => s.received_sides.lock().expect("sides lock").push(d.longest_side()),
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    }
    let vector = s.by_query.get(query).cloned().unwrap_or_else(|| hashed_features(&image, query, s.handshake.dim));
    Json(json!({"vector": vector})).into_response()
}
