use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use resroute_core::cost::ModelProfile;
use resroute_core::imageops::EncodeSettings;
use resroute_core::routing::effective_supported;
use resroute_core::vlm::DecodeParams;
use resroute_core::{LabelingConfig, ResolutionMenu, TrainConfig};
use resroute_gateway::config::rebase_profile;
use resroute_gateway::{load_file, FeatureEndpoint, GatewayConfig, VlmTarget};

use crate::error::{invalid, CliError};

fn default_profile() -> String {
    "patch-grid".into()
}

/// The shared configuration file. Every section is optional; commands
/// complain only about the sections they need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "ResolutionMenu::default_menu")]
    pub menu: ResolutionMenu,
    #[serde(default)]
    pub labeling: LabelingConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub target_vlm: Option<VlmTarget>,
    #[serde(default)]
    pub feature_endpoint: Option<FeatureEndpoint>,
    /// Built-in profile name or path to a profile file.
    #[serde(default = "default_profile")]
    pub profile: String,
    #[serde(default)]
    pub encode: EncodeSettings,
    #[serde(default)]
    pub gateway: Option<GatewayConfig>,
}

impl Default for ToolConfig {
    fn default() -> Self {
        ToolConfig {
            seed: None,
            menu: ResolutionMenu::default_menu(),
            labeling: LabelingConfig::default(),
            train: TrainConfig::default(),
            target_vlm: None,
            feature_endpoint: None,
            profile: default_profile(),
            encode: EncodeSettings::default(),
            gateway: None,
        }
    }
}

impl ToolConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg: ToolConfig = load_file(path)?;
        if let Some(t) = &mut cfg.target_vlm {
            t.rebase(path);
        }
        cfg.profile = rebase_profile(path, &cfg.profile);
        if let Some(g) = &mut cfg.gateway {
            g.rebase(path);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.labeling.validate().map_err(|m| invalid(format!("labeling: {m}")))?;
        if let Some(VlmTarget::Http(e)) = &self.target_vlm {
            e.validate().map_err(|m| invalid(format!("target_vlm: {m}")))?;
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration as canonical JSON.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }

    pub fn profile(&self, override_name: Option<&str>) -> Result<ModelProfile, CliError> {
        ModelProfile::resolve(override_name.unwrap_or(&self.profile)).map_err(invalid)
    }

    pub fn supported(&self, profile: &ModelProfile) -> Vec<u32> {
        effective_supported(&self.menu, Some(profile))
    }

    /// The target model, with `--spec` taking precedence over the file.
    pub fn target(&self, spec: Option<&Path>) -> Result<VlmTarget, CliError> {
        match (spec, &self.target_vlm) {
            (Some(s), _) => Ok(VlmTarget::Simulated { spec: s.to_owned() }),
            (None, Some(t)) => Ok(t.clone()),
            (None, None) => Err(invalid("no target model: pass --spec or configure [target_vlm]")),
        }
    }

    pub fn decode(&self, target: &VlmTarget) -> DecodeParams {
        match target {
            VlmTarget::Http(e) => e.decode(),
            VlmTarget::Simulated { .. } => DecodeParams::default(),
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
