//! HTTP serving path: feature lookup, resolution selection, resize, and the
//! forwarded model call, plus clients and stubs for the services involved.

pub mod config;
pub mod features;
pub mod http_vlm;
pub mod openai;
pub mod service;
pub mod stub;

pub use config::{load_file, ConfigError, Fallback, GatewayConfig, VlmTarget};
pub use features::{FeatureClient, FeatureEndpoint, FeatureError, FeatureHandshake};
pub use http_vlm::{HttpVlmClient, VlmEndpoint};
pub use service::{Gateway, GatewayError, GatewayTelemetry, RouteError, RouteResponse, Snapshot, Upstream};
