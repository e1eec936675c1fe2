//! Per-request resolution decisions shared by the gateway and offline evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::ModelProfile;
use crate::imageops::{target_dims, ImageDims};
use crate::menu::ResolutionMenu;
use crate::selector::{round_to_supported, ClassifierHead, FeatureVector, SelectorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoutingMode {
    /// Expected resolution under the head's softmax, rounded up.
    Continuous,
    /// Most probable menu entry.
    Discrete,
    /// Native image, no selection.
    Passthrough,
    Fixed(u32),
}

impl RoutingMode {
    pub fn needs_features(self) -> bool {
        matches!(self, RoutingMode::Continuous | RoutingMode::Discrete)
    }
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoutingMode::Continuous => f.write_str("continuous"),
            RoutingMode::Discrete => f.write_str("discrete"),
            RoutingMode::Passthrough => f.write_str("passthrough"),
            RoutingMode::Fixed(r) => write!(f, "fixed:{r}"),
        }
    }
}

impl FromStr for RoutingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "continuous" => Ok(RoutingMode::Continuous),
            "discrete" => Ok(RoutingMode::Discrete),
            "passthrough" | "native" => Ok(RoutingMode::Passthrough),
            other => match other.strip_prefix("fixed:") {
                Some(r) => r
                    .parse::<u32>()
                    .ok()
                    .filter(|r| *r > 0)
                    .map(RoutingMode::Fixed)
                    .ok_or_else(|| format!("bad fixed resolution `{r}`")),
                None => Err(format!("unknown mode `{s}` (continuous, discrete, passthrough, fixed:<r>)")),
            },
        }
    }
}

impl Serialize for RoutingMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RoutingMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RoutingError {
    #[error("mode {0} needs a feature vector")]
    MissingFeatures(RoutingMode),
    #[error("fixed resolution {0} is not a supported size")]
    UnsupportedFixed(u32),
    #[error(transparent)]
    Selector(#[from] SelectorError),
}

/// Supported sizes for a target: the menu's explicit list, else the
/// profile's, else the menu entries.
pub fn effective_supported(menu: &ResolutionMenu, profile: Option<&ModelProfile>) -> Vec<u32> {
    if menu.has_explicit_supported_sizes() {
        return menu.supported_sizes().to_vec();
    }
    profile.and_then(|p| p.supported()).unwrap_or_else(|| menu.supported_sizes().to_vec())
}

/// Checks that `mode` can be served with `supported`.
pub fn check_mode(mode: RoutingMode, supported: &[u32]) -> Result<(), RoutingError> {
    match mode {
        RoutingMode::Fixed(r) if !supported.contains(&r) => Err(RoutingError::UnsupportedFixed(r)),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub mode: RoutingMode,
    pub r_continuous: f64,
    pub r: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
    pub dims: ImageDims,
}

/// Picks the resolution for one image and the dimensions it is resized to.
pub fn decide(
    head: &ClassifierHead<f64>,
    supported: &[u32],
    mode: RoutingMode,
    native: ImageDims,
    features: Option<&FeatureVector<f64>>,
) -> Result<RouteDecision, RoutingError> {
    let (r_continuous, r, probabilities) = match mode {
        RoutingMode::Passthrough => {
            let r = native.longest_side();
            (r as f64, r, None)
        }
        RoutingMode::Fixed(r) => {
            check_mode(mode, supported)?;
            (r as f64, r, None)
        }
        RoutingMode::Discrete => {
            let z = features.ok_or(RoutingError::MissingFeatures(mode))?;
            let p = head.probabilities(z)?;
            let label = head.select_discrete(z)?;
            let r = round_to_supported(label.resolution as f64, supported)?;
            (label.resolution as f64, r, Some(p.as_slice().to_vec()))
        }
        RoutingMode::Continuous => {
            let z = features.ok_or(RoutingError::MissingFeatures(mode))?;
            let s = head.select(z, supported)?;
            (s.r_continuous, s.r, Some(s.probabilities))
        }
    };
    Ok(RouteDecision { mode, r_continuous, r, probabilities, dims: target_dims(native, r) })
}
