//! The downstream model interface shared by the labeler, evaluator and
//! gateway, plus a deterministic simulated model for desk-scale runs.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anls::{self, NLS_THRESHOLD};
use crate::imageops;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("authentication rejected (HTTP {0})")]
    AuthRejected(u16),
    #[error("request timed out after {0:.1}s")]
    Timeout(f64),
    #[error("unknown sample `{0}`")]
    UnknownSample(String),
    #[error("bad request image: {0}")]
    BadImage(String),
}

impl VlmError {
    /// Whether a retry could plausibly succeed.
    pub fn is_transient(&self) -> bool {
        matches!(self, VlmError::Transport(_) | VlmError::Timeout(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { temperature: 0.0, max_tokens: 128 }
    }
}

/// One image plus one query, as sent to the target model.
#[derive(Debug, Clone)]
pub struct VlmRequest {
    pub image_bytes: Vec<u8>,
    pub query: String,
    pub decode: DecodeParams,
    /// Dataset id, when the request comes from an offline run. Never sent over the wire.
    pub sample_id: Option<String>,
}

impl VlmRequest {
    pub fn new(image_bytes: Vec<u8>, query: impl Into<String>) -> Self {
        VlmRequest { image_bytes, query: query.into(), decode: DecodeParams::default(), sample_id: None }
    }

    pub fn with_sample_id(mut self, id: impl Into<String>) -> Self {
        self.sample_id = Some(id.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmResponse {
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
    pub latency_ms: f64,
}

#[async_trait]
pub trait VlmClient: Send + Sync {
    async fn chat(&self, req: &VlmRequest) -> Result<VlmResponse, VlmError>;
}

#[async_trait]
impl<T: VlmClient + ?Sized> VlmClient for std::sync::Arc<T> {
    async fn chat(&self, req: &VlmRequest) -> Result<VlmResponse, VlmError> {
        (**self).chat(req).await
    }
}

/// A utility level reached at or above `resolution`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampLevel {
    pub resolution: u32,
    pub utility: f64,
}

/// Planted behavior for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedSample {
    pub sufficient_resolution: u32,
    pub correct_answer: String,
    /// Upper bound on the raw similarity of wrong answers; must be below 0.5.
    #[serde(default)]
    pub sub_threshold_utility: f64,
    /// Optional multi-level behavior. When present, the answer quality at
    /// `r` is the utility of the highest level with `resolution <= r`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp: Option<Vec<RampLevel>>,
    /// Query text, used to find the sample when no id travels with a request.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimulatedVlmSpec {
    pub samples: BTreeMap<String, SimulatedSample>,
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("cannot read simulator spec {0}: {1}")]
    Io(String, std::io::Error),
    #[error("invalid simulator spec: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("sample `{id}`: {reason}")]
    Invalid { id: String, reason: String },
}

impl SimulatedVlmSpec {
    pub fn load(path: &Path) -> Result<Self, SpecError> {
        let text = std::fs::read_to_string(path).map_err(|e| SpecError::Io(path.display().to_string(), e))?;
        let spec: SimulatedVlmSpec = serde_json::from_str(&text)?;
        spec.validate(None)?;
        Ok(spec)
    }

    /// Checks sample invariants; with a range, thresholds must fall inside it.
    pub fn validate(&self, range: Option<(u32, u32)>) -> Result<(), SpecError> {
        for (id, s) in &self.samples {
            let bad = |reason: String| SpecError::Invalid { id: id.clone(), reason };
            if !(0.0..NLS_THRESHOLD).contains(&s.sub_threshold_utility) {
                return Err(bad(format!("sub_threshold_utility {} not in [0, 0.5)", s.sub_threshold_utility)));
            }
            if let Some((lo, hi)) = range {
                if s.sufficient_resolution < lo || s.sufficient_resolution > hi {
                    return Err(bad(format!("sufficient_resolution {} outside [{lo}, {hi}]", s.sufficient_resolution)));
                }
            }
            if s.correct_answer.trim().is_empty() {
                return Err(bad("empty correct_answer".into()));
            }
        }
        Ok(())
    }
}

/// Replacement character absent from `text`.
fn filler_for(text: &str) -> char {
    ['#', '~', '^', '@', '%', '|', '¤', '§']
        .into_iter()
        .find(|c| !text.contains(*c))
        .unwrap_or('\u{2603}')
}

/// Replaces `count` characters of `answer` (from the front) with a filler
/// that never occurs in it. Whitespace is also replaced so normalization
/// cannot shorten the corrupted span.
pub fn corrupt(answer: &str, count: usize) -> String {
    let filler = filler_for(answer);
    answer.chars().enumerate().map(|(i, c)| if i < count { filler } else { c }).collect()
}

/// Wrong answer whose raw similarity to `answer` is at most `bound`.
pub fn corrupt_below(answer: &str, bound: f64) -> String {
    let n = answer.chars().count();
    let count = ((1.0 - bound) * n as f64).ceil() as usize;
    corrupt(answer, count.min(n))
}

/// Answer whose similarity to `answer` is as close as possible to `utility`.
pub fn corrupt_to(answer: &str, utility: f64) -> String {
    let n = answer.chars().count();
    let count = ((1.0 - utility.clamp(0.0, 1.0)) * n as f64).round() as usize;
    corrupt(answer, count.min(n))
}

/// In-process simulated model. The effective resolution is the longest side
/// of the decoded request image, so callers exercise the real resize path.
#[derive(Debug, Clone, Default)]
pub struct SimulatedVlm {
    spec: SimulatedVlmSpec,
    by_query: HashMap<String, String>,
}

impl SimulatedVlm {
    pub fn new(spec: SimulatedVlmSpec) -> Self {
        let by_query = spec
            .samples
            .iter()
            .filter_map(|(id, s)| s.query.as_ref().map(|q| (q.clone(), id.clone())))
            .collect();
        SimulatedVlm { spec, by_query }
    }

    pub fn spec(&self) -> &SimulatedVlmSpec {
        &self.spec
    }

    pub fn resolve_id<'a>(&'a self, sample_id: Option<&'a str>, query: &str) -> Option<&'a str> {
        match sample_id {
            Some(id) if self.spec.samples.contains_key(id) => Some(id),
            _ => self.by_query.get(query).map(String::as_str),
        }
    }

    /// Answer for `sample_id` when viewed at `r_effective`.
    pub fn answer_at(&self, sample_id: &str, r_effective: u32) -> Result<String, VlmError> {
        let s = self.spec.samples.get(sample_id).ok_or_else(|| VlmError::UnknownSample(sample_id.to_owned()))?;
        if let Some(levels) = &s.ramp {
            let level = levels.iter().filter(|l| l.resolution <= r_effective).max_by_key(|l| l.resolution);
            return Ok(match level {
                Some(l) if l.utility >= 1.0 => s.correct_answer.clone(),
                Some(l) if l.utility >= NLS_THRESHOLD => corrupt_to(&s.correct_answer, l.utility),
                _ => corrupt_below(&s.correct_answer, s.sub_threshold_utility),
            });
        }
        Ok(if r_effective >= s.sufficient_resolution {
            s.correct_answer.clone()
        } else {
            corrupt_below(&s.correct_answer, s.sub_threshold_utility)
        })
    }

    pub fn simulated_chat(&self, sample_id: &str, _req: &VlmRequest, r_effective: u32) -> Result<VlmResponse, VlmError> {
        let answer = self.answer_at(sample_id, r_effective)?;
        Ok(VlmResponse { answer, usage: None, latency_ms: 0.0 })
    }
}

#[async_trait]
impl VlmClient for SimulatedVlm {
    async fn chat(&self, req: &VlmRequest) -> Result<VlmResponse, VlmError> {
        let id = self
            .resolve_id(req.sample_id.as_deref(), &req.query)
            .ok_or_else(|| VlmError::UnknownSample(req.sample_id.clone().unwrap_or_else(|| req.query.clone())))?
            .to_owned();
        let dims = imageops::probe_dims(&req.image_bytes).map_err(|e| VlmError::BadImage(e.to_string()))?;
        self.simulated_chat(&id, req, dims.longest_side())
    }
}

/// Raw similarity of a corrupted answer, for checking corruption bounds.
pub fn corruption_similarity(wrong: &str, correct: &str) -> f64 {
    anls::unthresholded_similarity(wrong, correct)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anls::anls;
    use proptest::prelude::*;

    fn spec_with(threshold: u32) -> SimulatedVlm {
        let mut spec = SimulatedVlmSpec::default();
        spec.samples.insert(
            "s1".into(),
            SimulatedSample {
                sufficient_resolution: threshold,
                correct_answer: "P. Carter".into(),
                sub_threshold_utility: 0.0,
                ramp: None,
                query: Some("who signed?".into()),
            },
        );
        SimulatedVlm::new(spec)
    }

    fn utility(vlm: &SimulatedVlm, r: u32) -> f64 {
        let a = vlm.answer_at("s1", r).unwrap();
        anls(&a, &["P. Carter".to_string()]).unwrap().value()
    }

    #[test]
    fn step_behavior() {
        let vlm = spec_with(768);
        assert_eq!(utility(&vlm, 1024), 1.0);
        assert_eq!(utility(&vlm, 384), 0.0);
        assert_eq!(utility(&vlm, 768), 1.0);
        let low = spec_with(384);
        assert_eq!(utility(&low, 384), 1.0);
        assert!(matches!(vlm.answer_at("nope", 384), Err(VlmError::UnknownSample(_))));
    }

    #[test]
    fn ramp_behavior() {
        let mut spec = SimulatedVlmSpec::default();
        let gt = "Quarterly revenue 2019".to_string();
        spec.samples.insert(
            "r".into(),
            SimulatedSample {
                sufficient_resolution: 1024,
                correct_answer: gt.clone(),
                sub_threshold_utility: 0.0,
                ramp: Some(vec![
                    RampLevel { resolution: 384, utility: 0.0 },
                    RampLevel { resolution: 768, utility: 0.65 },
                    RampLevel { resolution: 1024, utility: 0.93 },
                ]),
                query: None,
            },
        );
        let vlm = SimulatedVlm::new(spec);
        let u: Vec<f64> = [384, 768, 1024]
            .iter()
            .map(|r| anls(&vlm.answer_at("r", *r).unwrap(), std::slice::from_ref(&gt)).unwrap().value())
            .collect();
        assert_eq!(u[0], 0.0);
        assert!((u[1] - 0.65).abs() < 0.05, "{u:?}");
        assert!((u[2] - 0.93).abs() < 0.05, "{u:?}");
    }

    #[tokio::test]
    async fn chat_uses_decoded_dims_and_query_lookup() {
        let vlm = spec_with(768);
        let img = image::DynamicImage::new_rgb8(800, 600);
        let bytes = imageops::encode_jpeg(&img, 80).unwrap();
        let resp = vlm.chat(&VlmRequest::new(bytes.clone(), "who signed?")).await.unwrap();
        assert_eq!(resp.answer, "P. Carter");
        let small = imageops::encode_jpeg(&image::DynamicImage::new_rgb8(384, 288), 80).unwrap();
        let resp = vlm.chat(&VlmRequest::new(small, "x").with_sample_id("s1")).await.unwrap();
        assert_ne!(resp.answer, "P. Carter");
        assert!(matches!(vlm.chat(&VlmRequest::new(bytes, "other")).await, Err(VlmError::UnknownSample(_))));
    }

    #[test]
    fn spec_validation() {
        let mut spec = SimulatedVlmSpec::default();
        spec.samples.insert(
            "a".into(),
            SimulatedSample {
                sufficient_resolution: 2000,
                correct_answer: "x".into(),
                sub_threshold_utility: 0.0,
                ramp: None,
                query: None,
            },
        );
        assert!(spec.validate(None).is_ok());
        assert!(spec.validate(Some((384, 1024))).is_err());
        spec.samples.get_mut("a").unwrap().sub_threshold_utility = 0.5;
        assert!(spec.validate(None).is_err());
    }

    proptest! {
        #[test]
        fn corruption_respects_bound(answer in "[A-Za-z0-9 .#~]{1,30}", bound in 0.0f64..0.5) {
            let wrong = corrupt_below(&answer, bound);
            prop_assert!(corruption_similarity(&wrong, &answer) <= bound + 1e-12);
            prop_assert_eq!(anls(&wrong, std::slice::from_ref(&answer)).unwrap().value(), 0.0);
        }
    }
}
