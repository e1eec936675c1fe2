use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Semaphore;
use tracing::{info, warn};

use resroute_core::cost::{estimate_text_tokens, relative_savings, ModelProfile};
use resroute_core::imageops::{self, EncodeSettings, ImageDims};
use resroute_core::routing::{decide, effective_supported, RoutingMode};
use resroute_core::selector::round_to_supported;
use resroute_core::vlm::{DecodeParams, SimulatedVlm, SimulatedVlmSpec, VlmClient, VlmError, VlmRequest};
use resroute_core::{FeatureVector, Head, ResolutionMenu};

use crate::config::{ConfigError, Fallback, GatewayConfig, VlmTarget};
use crate::features::{FeatureClient, FeatureError};
use crate::http_vlm::HttpVlmClient;
use crate::openai::{self, ImageSource};

/// Header selecting a routing mode for one chat-completions request.
pub const MODE_HEADER: &str = "x-resroute-mode";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("head {path}: {message}")]
    Head { path: String, message: String },
    #[error("profile: {0}")]
    Profile(String),
    #[error("target model: {0}")]
    Vlm(#[from] VlmError),
    #[error("feature service: {0}")]
    Feature(#[from] FeatureError),
    #[error("simulator spec: {0}")]
    Spec(String),
}

/// Request-level failure, attributed to the pipeline stage that raised it.
#[derive(Debug, Error)]
pub enum RouteError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("feature service unavailable: {0}")]
    FeatureUnavailable(String),
    #[error("selection failed: {0}")]
    Select(String),
    #[error("resize failed: {0}")]
    Resize(String),
    #[error("target model: {0}")]
    Vlm(VlmError),
}

impl RouteError {
    pub fn stage(&self) -> &'static str {
        match self {
            RouteError::BadRequest(_) => "request",
            RouteError::Decode(_) => "decode",
            RouteError::FeatureUnavailable(_) => "feature",
            RouteError::Select(_) => "select",
            RouteError::Resize(_) => "resize",
            RouteError::Vlm(_) => "vlm",
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            RouteError::BadRequest(_) | RouteError::Decode(_) => StatusCode::BAD_REQUEST,
            RouteError::FeatureUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            RouteError::Select(_) | RouteError::Resize(_) => StatusCode::INTERNAL_SERVER_ERROR,
            RouteError::Vlm(VlmError::Timeout(_)) => StatusCode::GATEWAY_TIMEOUT,
            RouteError::Vlm(_) => StatusCode::BAD_GATEWAY,
        }
    }
}

impl IntoResponse for RouteError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"stage": self.stage(), "message": self.to_string()}});
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub feature: f64,
    pub select: f64,
    pub resize: f64,
    pub vlm: f64,
}

/// Cost and routing evidence returned with every answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayTelemetry {
    /// Mode actually applied; differs from the requested one when degraded.
    pub mode: RoutingMode,
    pub requested_mode: RoutingMode,
    pub chosen_r_continuous: f64,
    pub chosen_r_rounded: u32,
    #[serde(default)]
    pub probabilities: Option<Vec<f64>>,
    pub dims_native: ImageDims,
    pub dims_sent: ImageDims,
    pub profile: String,
    pub visual_tokens_est: u64,
    pub text_tokens: u64,
    pub flops_est: f64,
    pub flops_native_est: f64,
    pub savings_pct: f64,
    pub degraded: bool,
    #[serde(default)]
    pub degraded_reason: Option<String>,
    pub latency_ms: StageLatency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteResponse {
    pub answer: String,
    pub telemetry: GatewayTelemetry,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RouteRequest {
    #[serde(default)]
    image_b64: Option<String>,
    #[serde(default)]
    image_url: Option<String>,
    query: String,
    #[serde(default)]
    mode: Option<RoutingMode>,
}

/// Immutable routing state; replaced as a whole on reload.
pub struct Snapshot {
    pub head: Head,
    pub menu: ResolutionMenu,
    pub supported: Vec<u32>,
    pub profile: ModelProfile,
    pub mode: RoutingMode,
    pub fallback: Fallback,
    pub encode: EncodeSettings,
    pub decode: DecodeParams,
}

impl Snapshot {
    pub fn new(head: Head, profile: ModelProfile, cfg: &GatewayConfig) -> Self {
        let supported = effective_supported(&cfg.menu, Some(&profile));
        let decode = match &cfg.target_vlm {
            VlmTarget::Http(e) => e.decode(),
            VlmTarget::Simulated { .. } => DecodeParams::default(),
        };
        Snapshot {
            head,
            menu: cfg.menu.clone(),
            supported,
            profile,
            mode: cfg.mode,
            fallback: cfg.fallback,
            encode: EncodeSettings::default(),
            decode,
        }
    }
}

pub enum Upstream {
    Http(Arc<HttpVlmClient>),
    Simulated(Arc<SimulatedVlm>),
}

impl Upstream {
    pub fn from_target(target: &VlmTarget) -> Result<Self, GatewayError> {
        Ok(match target {
            VlmTarget::Http(e) => Upstream::Http(Arc::new(HttpVlmClient::new(e.clone())?)),
            VlmTarget::Simulated { spec } => {
                let spec = SimulatedVlmSpec::load(spec).map_err(|e| GatewayError::Spec(e.to_string()))?;
                Upstream::Simulated(Arc::new(SimulatedVlm::new(spec)))
            }
        })
    }

    pub fn client(&self) -> &dyn VlmClient {
        match self {
            Upstream::Http(c) => c.as_ref(),
            Upstream::Simulated(s) => s.as_ref(),
        }
    }

    async fn probe(&self) -> bool {
        match self {
            Upstream::Http(c) => c.probe().await,
            Upstream::Simulated(_) => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Health {
    feature_endpoint: bool,
    target_vlm: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthReport {
    /// `ok`, or `degraded:` followed by the unreachable dependencies.
    pub status: String,
    pub feature_endpoint: bool,
    pub target_vlm: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub served: u64,
    pub failed: u64,
    pub degraded: u64,
    pub in_flight: usize,
    pub max_in_flight: usize,
    pub concurrency_limit: usize,
}

pub struct Gateway {
    snapshot: RwLock<Arc<Snapshot>>,
    features: FeatureClient,
    upstream: Upstream,
    limiter: Semaphore,
    limit: usize,
    health: Mutex<Health>,
    fetcher: reqwest::Client,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    served: AtomicU64,
    failed: AtomicU64,
    degraded: AtomicU64,
}

struct InFlight<'a>(&'a Gateway);

impl<'a> InFlight<'a> {
    fn enter(g: &'a Gateway) -> Self {
        let now = g.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        g.max_in_flight.fetch_max(now, Ordering::SeqCst);
        InFlight(g)
    }
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Output of the selection and resize stages, before the model call.
struct Prepared {
    bytes: Vec<u8>,
    telemetry: GatewayTelemetry,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

impl Gateway {
    pub fn new(snapshot: Snapshot, features: FeatureClient, upstream: Upstream, concurrency_limit: usize) -> Self {
        let limit = concurrency_limit.max(1);
        Gateway {
            snapshot: RwLock::new(Arc::new(snapshot)),
            features,
            upstream,
            limiter: Semaphore::new(limit),
            limit,
            health: Mutex::new(Health { feature_endpoint: true, target_vlm: true }),
            fetcher: reqwest::Client::builder().timeout(Duration::from_secs(30)).build().expect("http client"),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            served: AtomicU64::new(0),
            failed: AtomicU64::new(0),
            degraded: AtomicU64::new(0),
        }
    }

    /// Loads the head and profile named in `cfg`, validates, and checks the
    /// feature dimension against the service handshake when it is reachable.
    pub async fn from_config(cfg: &GatewayConfig) -> Result<Self, GatewayError> {
        let head = load_head(&cfg.head_path)?;
        let profile = ModelProfile::resolve(&cfg.profile).map_err(|e| GatewayError::Profile(e.to_string()))?;
        cfg.validate(&head, &profile)?;
        let features = FeatureClient::new(cfg.feature_endpoint.clone())?;
        match features.handshake().await {
            Ok(h) if h.dim != head.dim() => {
                return Err(GatewayError::Feature(FeatureError::DimMismatch { got: h.dim, expected: head.dim() }))
            }
            Ok(h) => info!(backbone = %h.backbone, layer = h.layer, dim = h.dim, "feature service handshake"),
            Err(e) => warn!(error = %e, "feature service handshake failed; continuing"),
        }
        let upstream = Upstream::from_target(&cfg.target_vlm)?;
        let snapshot = Snapshot::new(head, profile, cfg);
        Ok(Gateway::new(snapshot, features, upstream, cfg.concurrency_limit))
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Swaps in new routing state; requests already running keep the old one.
    pub fn reload(&self, snapshot: Snapshot) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(snapshot);
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            served: self.served.load(Ordering::SeqCst),
            failed: self.failed.load(Ordering::SeqCst),
            degraded: self.degraded.load(Ordering::SeqCst),
            in_flight: self.in_flight.load(Ordering::SeqCst),
            max_in_flight: self.max_in_flight.load(Ordering::SeqCst),
            concurrency_limit: self.limit,
        }
    }

    pub async fn probe_once(&self) {
        let (f, v) = tokio::join!(self.features.probe(), self.upstream.probe());
        *self.health.lock().expect("health lock") = Health { feature_endpoint: f, target_vlm: v };
    }

    pub fn spawn_probes(self: &Arc<Self>, every: Duration) -> tokio::task::JoinHandle<()> {
        let me = Arc::clone(self);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                me.probe_once().await;
            }
        })
    }

    pub fn health(&self) -> HealthReport {
        let h = *self.health.lock().expect("health lock");
        let mut down = Vec::new();
        if !h.feature_endpoint {
            down.push("feature_endpoint");
        }
        if !h.target_vlm {
            down.push("target_vlm");
        }
        let status = if down.is_empty() { "ok".to_string() } else { format!("degraded:{}", down.join(",")) };
        HealthReport { status, feature_endpoint: h.feature_endpoint, target_vlm: h.target_vlm }
    }

    async fn fetch_image(&self, url: &str) -> Result<Vec<u8>, RouteError> {
        if url.starts_with("data:") {
            return openai::parse_data_url(url).ok_or_else(|| RouteError::BadRequest("malformed data URL".into()));
        }
        if !(url.starts_with("http://") || url.starts_with("https://")) {
            return Err(RouteError::BadRequest(format!("unsupported image URL `{url}`")));
        }
        let resp = self.fetcher.get(url).send().await.map_err(|e| RouteError::BadRequest(format!("fetch {url}: {e}")))?;
        if !resp.status().is_success() {
            return Err(RouteError::BadRequest(format!("fetch {url}: HTTP {}", resp.status())));
        }
        Ok(resp.bytes().await.map_err(|e| RouteError::BadRequest(format!("fetch {url}: {e}")))?.to_vec())
    }

    /// Decode, cheap pass, selection, resize.
    async fn prepare(&self, image: Vec<u8>, query: &str, mode: Option<RoutingMode>) -> Result<Prepared, RouteError> {
        if query.trim().is_empty() {
            return Err(RouteError::BadRequest("query is empty".into()));
        }
        let snap = self.snapshot();
        let requested = mode.unwrap_or(snap.mode);
        let (decoded, image) = tokio::task::spawn_blocking(move || (imageops::decode(&image), image))
            .await
            .map_err(|e| RouteError::Decode(e.to_string()))?;
        let decoded = Arc::new(decoded.map_err(|e| RouteError::Decode(e.to_string()))?);
        let native = ImageDims::of(&decoded);
        let mut latency = StageLatency::default();

        let mut applied = requested;
        let mut degraded_reason = None;
        let mut features = None;
        if requested.needs_features() {
            let t = Instant::now();
            let (img, r1, enc) = (decoded.clone(), snap.menu.min(), snap.encode);
            let cheap = tokio::task::spawn_blocking(move || imageops::render_at(&img, r1, enc))
                .await
                .map_err(|e| RouteError::Resize(e.to_string()))?
                .map_err(|e| RouteError::Resize(e.to_string()))?;
            match self.features.features(&cheap.1, query, snap.head.dim()).await {
                Ok(v) => features = Some(FeatureVector::new(v).map_err(|e| RouteError::Select(e.to_string()))?),
                Err(e) => match snap.fallback {
                    Fallback::Fail => return Err(RouteError::FeatureUnavailable(e.to_string())),
                    Fallback::Degrade => {
                        warn!(error = %e, "feature service failed; serving at the largest menu resolution");
                        let r_max = round_to_supported(snap.menu.max() as f64, &snap.supported)
                            .map_err(|e| RouteError::Select(e.to_string()))?;
                        applied = RoutingMode::Fixed(r_max);
                        degraded_reason = Some(e.to_string());
                    }
                },
            }
            latency.feature = ms(t);
        }

        let t = Instant::now();
        let decision = decide(&snap.head, &snap.supported, applied, native, features.as_ref())
            .map_err(|e| RouteError::Select(e.to_string()))?;
        latency.select = ms(t);

        let t = Instant::now();
        let bytes = if decision.dims == native {
            image
        } else {
            let (img, r, enc) = (decoded.clone(), decision.r, snap.encode);
            let (dims, bytes) = tokio::task::spawn_blocking(move || imageops::render_at(&img, r, enc))
                .await
                .map_err(|e| RouteError::Resize(e.to_string()))?
                .map_err(|e| RouteError::Resize(e.to_string()))?;
            debug_assert_eq!(dims, decision.dims);
            bytes
        };
        latency.resize = ms(t);

        let text_tokens = estimate_text_tokens(query);
        let flops_est = snap.profile.flops(decision.dims, text_tokens);
        let flops_native_est = snap.profile.flops(native, text_tokens);
        let telemetry = GatewayTelemetry {
            mode: applied,
            requested_mode: requested,
            chosen_r_continuous: decision.r_continuous,
            chosen_r_rounded: decision.r,
            probabilities: decision.probabilities,
            dims_native: native,
            dims_sent: decision.dims,
            profile: snap.profile.name.clone(),
            visual_tokens_est: snap.profile.tokens(decision.dims),
            text_tokens,
            flops_est,
            flops_native_est,
            savings_pct: relative_savings(flops_native_est, flops_est).map_err(|e| RouteError::Select(e.to_string()))?,
            degraded: degraded_reason.is_some(),
            degraded_reason,
            latency_ms: latency,
        };
        Ok(Prepared { bytes, telemetry })
    }

    fn record_served(&self, telemetry: Option<&GatewayTelemetry>) {
        self.served.fetch_add(1, Ordering::SeqCst);
        if telemetry.is_some_and(|t| t.degraded) {
            self.degraded.fetch_add(1, Ordering::SeqCst);
        }
    }

    fn record_failed(&self) {
        self.failed.fetch_add(1, Ordering::SeqCst);
    }

    /// Full pipeline for one image and query.
    pub async fn handle(&self, image: Vec<u8>, query: &str, mode: Option<RoutingMode>) -> Result<RouteResponse, RouteError> {
        let _permit = self.limiter.acquire().await.map_err(|e| RouteError::BadRequest(e.to_string()))?;
        let _guard = InFlight::enter(self);
        let result = async {
            let Prepared { bytes, mut telemetry } = self.prepare(image, query, mode).await?;
            let t = Instant::now();
            let mut req = VlmRequest::new(bytes, query);
            req.decode = self.snapshot().decode;
            let resp = self.upstream.client().chat(&req).await.map_err(RouteError::Vlm)?;
            telemetry.latency_ms.vlm = ms(t);
            Ok(RouteResponse { answer: resp.answer, telemetry })
        }
        .await;
        match &result {
            Ok(r) => self.record_served(Some(&r.telemetry)),
            Err(_) => self.record_failed(),
        }
        result
    }

    /// Applies selection to the image of an OpenAI chat body and forwards it.
    pub async fn handle_chat(&self, mut body: Value, mode: Option<RoutingMode>) -> Result<Value, RouteError> {
        let _permit = self.limiter.acquire().await.map_err(|e| RouteError::BadRequest(e.to_string()))?;
        let _guard = InFlight::enter(self);
        let found = openai::find_image(&body).map_err(RouteError::BadRequest)?;
        let result = async {
            let Some(at) = found else {
                // nothing to route; forward untouched
                return match &self.upstream {
                    Upstream::Http(c) => c.chat_raw(body).await.map_err(RouteError::Vlm).map(|v| (v, None)),
                    Upstream::Simulated(_) => Err(RouteError::BadRequest("request has no image part".into())),
                };
            };
            let image = match &at.source {
                ImageSource::Inline(b) => b.clone(),
                ImageSource::Remote(url) => self.fetch_image(url).await?,
            };
            let Prepared { bytes, mut telemetry } = self.prepare(image, &at.query, mode).await?;
            let t = Instant::now();
            let out = match &self.upstream {
                Upstream::Http(c) => {
                    openai::replace_image(&mut body, &at, &bytes);
                    c.chat_raw(body).await.map_err(RouteError::Vlm)?
                }
                Upstream::Simulated(s) => {
                    let resp = s.chat(&VlmRequest::new(bytes, at.query.clone())).await.map_err(RouteError::Vlm)?;
                    let model = body.get("model").and_then(Value::as_str).unwrap_or("simulated").to_owned();
                    openai::completion_response(&model, &resp.answer, resp.usage)
                }
            };
            telemetry.latency_ms.vlm = ms(t);
            Ok((out, Some(telemetry)))
        }
        .await;
        match result {
            Ok((mut out, telemetry)) => {
                self.record_served(telemetry.as_ref());
                if let Some(t) = &telemetry {
                    out["resroute"] = serde_json::to_value(t).expect("telemetry serializes");
                }
                Ok(out)
            }
            Err(e) => {
                self.record_failed();
                Err(e)
            }
        }
    }

    pub fn router(self: Arc<Self>) -> Router {
        Router::new()
            .route("/v1/route", post(route_handler))
            .route("/v1/chat/completions", post(chat_handler))
            .route("/healthz", get(health_handler))
            .route("/v1/stats", get(stats_handler))
            .layer(DefaultBodyLimit::max(64 << 20))
            .with_state(self)
    }
}

pub fn load_head(path: &Path) -> Result<Head, GatewayError> {
    Head::load(path).map_err(|e| GatewayError::Head { path: path.display().to_string(), message: e.to_string() })
}

async fn route_handler(State(gw): State<Arc<Gateway>>, body: Bytes) -> Result<Json<RouteResponse>, RouteError> {
    let req: RouteRequest = serde_json::from_slice(&body).map_err(|e| RouteError::BadRequest(e.to_string()))?;
    let image = match (&req.image_b64, &req.image_url) {
        (Some(b), None) => STANDARD.decode(b.trim()).map_err(|e| RouteError::BadRequest(format!("image_b64: {e}")))?,
        (None, Some(url)) => gw.fetch_image(url).await?,
        _ => return Err(RouteError::BadRequest("exactly one of image_b64 and image_url is required".into())),
    };
    Ok(Json(gw.handle(image, &req.query, req.mode).await?))
}

async fn chat_handler(State(gw): State<Arc<Gateway>>, headers: HeaderMap, body: Bytes) -> Result<Json<Value>, RouteError> {
    let mode = match headers.get(MODE_HEADER) {
        Some(v) => Some(
            v.to_str()
                .map_err(|e| RouteError::BadRequest(e.to_string()))?
                .parse::<RoutingMode>()
                .map_err(RouteError::BadRequest)?,
        ),
        None => None,
    };
    let body: Value = serde_json::from_slice(&body).map_err(|e| RouteError::BadRequest(e.to_string()))?;
    Ok(Json(gw.handle_chat(body, mode).await?))
}

async fn health_handler(State(gw): State<Arc<Gateway>>) -> Json<HealthReport> {
    Json(gw.health())
}

async fn stats_handler(State(gw): State<Arc<Gateway>>) -> Json<GatewayStats> {
    Json(gw.stats())
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    gateway: Arc<Gateway>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, gateway.router()).with_graceful_shutdown(shutdown).await
}
