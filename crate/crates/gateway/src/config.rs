use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use resroute_core::cost::ModelProfile;
use resroute_core::routing::{check_mode, effective_supported, RoutingMode};
use resroute_core::{ClassifierHead, ResolutionMenu, Scalar};

use crate::features::FeatureEndpoint;
use crate::http_vlm::VlmEndpoint;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Syntax { path: PathBuf, message: String },
    /// A value failed validation; `at` is the dotted key path.
    #[error("{path}: at `{at}`: {message}")]
    Invalid { path: PathBuf, at: String, message: String },
    #[error("{0}")]
    Rule(String),
}

/// Reads a TOML or JSON file (by extension) into `T`, reporting the key path
/// of the first offending value.
pub fn load_file<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let value: serde_json::Value = if is_json {
        serde_json::from_str(&text).map_err(|e| ConfigError::Syntax { path: path.into(), message: e.to_string() })?
    } else {
        toml::from_str(&text).map_err(|e| ConfigError::Syntax { path: path.into(), message: e.to_string() })?
    };
    serde_path_to_error::deserialize(value).map_err(|e| ConfigError::Invalid {
        path: path.into(),
        at: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Resolves `p` against the directory of the config file it came from.
pub fn relative_to(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_owned();
    }
    config.parent().map_or_else(|| p.to_owned(), |dir| dir.join(p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VlmTarget {
    Http(VlmEndpoint),
    /// In-process simulator driven by a spec file.
    Simulated { spec: PathBuf },
}

impl VlmTarget {
    pub fn rebase(&mut self, config: &Path) {
        if let VlmTarget::Simulated { spec } = self {
            *spec = relative_to(config, spec);
        }
    }
}

/// Profile names are kept; anything else is a path relative to `config`.
pub fn rebase_profile(config: &Path, profile: &str) -> String {
    if ModelProfile::BUILTIN_NAMES.contains(&profile) {
        return profile.to_owned();
    }
    relative_to(config, Path::new(profile)).to_string_lossy().into_owned()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Serve at the largest menu resolution and flag the response.
    #[default]
    Degrade,
    Fail,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}
fn default_profile() -> String {
    "patch-grid".into()
}
fn default_mode() -> RoutingMode {
    RoutingMode::Continuous
}
fn default_limit() -> usize {
    16
}
fn default_probe() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub feature_endpoint: FeatureEndpoint,
    pub target_vlm: VlmTarget,
    pub head_path: PathBuf,
    #[serde(default = "ResolutionMenu::default_menu")]
    pub menu: ResolutionMenu,
    /// Built-in profile name or path to a profile file.
    #[serde(default = "default_profile")]
    pub profile: String,
    #[serde(default = "default_mode")]
    pub mode: RoutingMode,
    /// Requests processed at once; further requests wait.
    #[serde(default = "default_limit")]
    pub concurrency_limit: usize,
    #[serde(default)]
    pub fallback: Fallback,
    #[serde(default = "default_probe")]
    pub probe_interval_s: f64,
}

impl GatewayConfig {
    pub fn new(feature_endpoint: FeatureEndpoint, target_vlm: VlmTarget, head_path: PathBuf) -> Self {
        GatewayConfig {
            listen: default_listen(),
            feature_endpoint,
            target_vlm,
            head_path,
            menu: ResolutionMenu::default_menu(),
            profile: default_profile(),
            mode: default_mode(),
            concurrency_limit: default_limit(),
            fallback: Fallback::default(),
            probe_interval_s: default_probe(),
        }
    }

    /// Loads and rebases relative paths onto the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: GatewayConfig = load_file(path)?;
        cfg.rebase(path);
        Ok(cfg)
    }

    /// Resolves relative file paths against the directory of `config`.
    pub fn rebase(&mut self, config: &Path) {
        self.head_path = relative_to(config, &self.head_path);
        self.target_vlm.rebase(config);
        self.profile = rebase_profile(config, &self.profile);
    }

    /// Checks the rules that span several fields and the loaded head.
    pub fn validate<T: Scalar>(&self, head: &ClassifierHead<T>, profile: &ModelProfile) -> Result<(), ConfigError> {
        if self.concurrency_limit == 0 {
            return Err(ConfigError::Rule("concurrency_limit must be at least 1".into()));
        }
        if !(self.probe_interval_s > 0.0) {
            return Err(ConfigError::Rule("probe_interval_s must be positive".into()));
        }
        if !head.menu().same_entries(&self.menu) {
            return Err(ConfigError::Rule(format!(
                "head menu {:?} differs from configured menu {:?}",
                head.menu().entries(),
                self.menu.entries()
            )));
        }
        if let VlmTarget::Http(e) = &self.target_vlm {
            e.validate().map_err(|m| ConfigError::Rule(format!("target_vlm: {m}")))?;
        }
        let supported = effective_supported(&self.menu, Some(profile));
        check_mode(self.mode, &supported).map_err(|e| ConfigError::Rule(format!("mode: {e}")))
    }
}
