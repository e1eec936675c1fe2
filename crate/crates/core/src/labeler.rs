//! Sufficiency labeling: query the target model at each menu resolution in
//! increasing order, score every answer, and pick the smallest resolution whose
//! utility reaches `tau` with no later gain above `delta`.

use std::collections::BTreeMap;
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::anls::{MetricKind, UtilityScore};
use crate::imageops::{ImageDims, RenderCache};
use crate::menu::ResolutionMenu;
use crate::store::{DatasetWriter, SampleRecord, SampleStatus, StoreError};
use crate::vlm::{DecodeParams, VlmClient, VlmError, VlmRequest};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("utility vector has length {got}, menu has {expected} entries")]
    LengthMismatch { got: usize, expected: usize },
    #[error("utility {0} outside [0, 1]")]
    UtilityOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelingConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_early_exit")]
    pub early_exit: bool,
}

fn default_tau() -> f64 {
    0.85
}
fn default_delta() -> f64 {
    0.1
}
fn default_early_exit() -> bool {
    true
}

impl Default for LabelingConfig {
    fn default() -> Self {
        LabelingConfig { tau: default_tau(), delta: default_delta(), early_exit: default_early_exit() }
    }
}

impl LabelingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(format!("tau must be in (0, 1], got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(format!("delta must be in [0, 1), got {}", self.delta));
        }
        Ok(())
    }
}

/// The minimal sufficient resolution and its menu index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SufficiencyLabel {
    #[serde(rename = "r")]
    pub resolution: u32,
    #[serde(rename = "k")]
    pub class_index: usize,
}

impl SufficiencyLabel {
    pub fn from_index(menu: &ResolutionMenu, class_index: usize) -> Self {
        SufficiencyLabel { resolution: menu.entries()[class_index], class_index }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutStep {
    pub r: u32,
    pub response: String,
    pub utility: UtilityScore,
}

/// Responses and utilities for a prefix of the menu.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RolloutRecord {
    pub steps: Vec<RolloutStep>,
}

impl RolloutRecord {
    /// Index of the last resolution evaluated, if any.
    pub fn evaluated_upto(&self) -> Option<usize> {
        self.steps.len().checked_sub(1)
    }

    pub fn utilities(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.utility.value()).collect()
    }
}

/// Status of one index given the utilities observed so far.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Verdict {
    Fails,
    Qualifies,
    Undecided,
}

fn verdict(prefix: &[f64], k: usize, complete: bool, cfg: &LabelingConfig) -> Verdict {
    let uk = prefix[k];
    if uk < cfg.tau {
        return Verdict::Fails;
    }
    if prefix[k + 1..].iter().any(|&ul| ul - uk > cfg.delta) {
        return Verdict::Fails;
    }
    // Unseen utilities are at most 1, so 1 - u_k <= delta bounds every later gain.
    if complete || 1.0 - uk <= cfg.delta {
        Verdict::Qualifies
    } else {
        Verdict::Undecided
    }
}

/// Label implied by a prefix of utilities over a `k_total`-entry menu, if the
/// prefix already determines it.
///
/// Returns the same index a full scan would for every completion of the
/// prefix with utilities in `[0, 1]`.
pub fn decided_index(prefix: &[f64], k_total: usize, cfg: &LabelingConfig) -> Option<usize> {
    let complete = prefix.len() == k_total;
    for k in 0..prefix.len() {
        match verdict(prefix, k, complete, cfg) {
            Verdict::Fails => continue,
            Verdict::Qualifies => return Some(k),
            Verdict::Undecided => return None,
        }
    }
    complete.then(|| k_total - 1)
}

/// Smallest index whose utility reaches `tau` with no later gain above `delta`;
/// the largest entry when none qualifies.
pub fn label_from_utilities(
    u: &[f64],
    menu: &ResolutionMenu,
    cfg: &LabelingConfig,
) -> Result<SufficiencyLabel, LabelError> {
    if u.len() != menu.len() {
        return Err(LabelError::LengthMismatch { got: u.len(), expected: menu.len() });
    }
    if let Some(bad) = u.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(LabelError::UtilityOutOfRange(*bad));
    }
    let k = decided_index(u, u.len(), cfg).expect("complete vector always decides");
    Ok(SufficiencyLabel::from_index(menu, k))
}

/// Everything the labeler needs to know about one sample.
#[derive(Debug, Clone)]
pub struct LabelTask {
    pub sample_id: String,
    pub image_ref: String,
    pub query: String,
    pub ground_truths: Vec<String>,
    pub metric: MetricKind,
}

impl From<&SampleRecord> for LabelTask {
    fn from(r: &SampleRecord) -> Self {
        LabelTask {
            sample_id: r.id.clone(),
            image_ref: r.image.clone(),
            query: r.query.clone(),
            ground_truths: r.gts.clone(),
            metric: r.metric,
        }
    }
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("image: {0}")]
    Image(String),
    #[error("model call at r={resolution}: {source}")]
    Vlm { resolution: u32, source: VlmError },
    #[error("metric: {0}")]
    Metric(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutcome {
    pub record: RolloutRecord,
    pub label: SufficiencyLabel,
    /// Model calls actually issued; resolutions above the native size reuse
    /// the previous answer.
    pub queries: usize,
}

/// Rolls out one sample over the menu and labels it.
pub async fn rollout_and_label<V: VlmClient + ?Sized>(
    task: &LabelTask,
    menu: &ResolutionMenu,
    cfg: &LabelingConfig,
    vlm: &V,
    renderer: &Arc<RenderCache>,
    decode: DecodeParams,
) -> Result<RolloutOutcome, RolloutError> {
    let mut record = RolloutRecord::default();
    let mut utilities = Vec::with_capacity(menu.len());
    let mut queries = 0usize;
    let mut last_dims: Option<ImageDims> = None;

    for &r in menu.entries() {
        let (dims, bytes) = match renderer.cached(&task.image_ref, r) {
            Some(hit) => hit,
            None => {
                let cache = renderer.clone();
                let image_ref = task.image_ref.clone();
                tokio::task::spawn_blocking(move || cache.render(&image_ref, r))
                    .await
                    .map_err(|e| RolloutError::Image(e.to_string()))?
                    .map_err(|e| RolloutError::Image(e.to_string()))?
            }
        };

        let (response, utility) = match (last_dims, record.steps.last()) {
            // native size reached: the view is identical to the previous one
            (Some(prev), Some(step)) if prev == dims => (step.response.clone(), step.utility),
            _ => {
                let mut req = VlmRequest::new(bytes.as_ref().clone(), task.query.clone()).with_sample_id(&task.sample_id);
                req.decode = decode;
                let resp = vlm.chat(&req).await.map_err(|source| RolloutError::Vlm { resolution: r, source })?;
                queries += 1;
                let u = task
                    .metric
                    .score(&resp.answer, &task.ground_truths)
                    .map_err(|e| RolloutError::Metric(e.to_string()))?;
                (resp.answer, u)
            }
        };
        last_dims = Some(dims);
        utilities.push(utility.value());
        record.steps.push(RolloutStep { r, response, utility });

        if cfg.early_exit {
            if let Some(k) = decided_index(&utilities, menu.len(), cfg) {
                return Ok(RolloutOutcome { record, label: SufficiencyLabel::from_index(menu, k), queries });
            }
        }
    }
    let label = label_from_utilities(&utilities, menu, cfg).map_err(|e| RolloutError::Metric(e.to_string()))?;
    Ok(RolloutOutcome { record, label, queries })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UtilityStats {
    pub count: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub labeled: usize,
    pub failed: usize,
    /// Samples already in the store before this run.
    pub skipped: usize,
    pub model_calls: usize,
    pub label_histogram: BTreeMap<u32, usize>,
    /// Mean utility observed at each menu resolution.
    pub utility_by_resolution: BTreeMap<u32, UtilityStats>,
}

pub struct LabelRun<'a, V: VlmClient + ?Sized> {
    pub menu: &'a ResolutionMenu,
    pub cfg: &'a LabelingConfig,
    pub vlm: &'a V,
    pub renderer: Arc<RenderCache>,
    pub decode: DecodeParams,
    pub parallelism: usize,
}

/// Labels every sample not yet in `store`. Rollouts for distinct samples run
/// concurrently; results are appended in input order through one writer.
pub async fn label_dataset<V, I>(
    samples: I,
    run: LabelRun<'_, V>,
    store: &mut DatasetWriter,
) -> Result<LabelSummary, StoreError>
where
    V: VlmClient + ?Sized,
    I: IntoIterator<Item = SampleRecord>,
{
    let mut summary = LabelSummary::default();
    let mut pending = Vec::new();
    for s in samples {
        if store.contains(&s.id) {
            summary.skipped += 1;
        } else {
            pending.push(s);
        }
    }

    let LabelRun { menu, cfg, vlm, renderer, decode, parallelism } = run;
    let mut results = stream::iter(pending)
        .map(|sample| {
            let renderer = renderer.clone();
            async move {
                let task = LabelTask::from(&sample);
                let outcome = rollout_and_label(&task, menu, cfg, vlm, &renderer, decode).await;
                (sample, outcome)
            }
        })
        .buffered(parallelism.max(1));

    let mut sums: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
    while let Some((mut sample, outcome)) = results.next().await {
        match outcome {
            Ok(out) => {
                debug!(id = %sample.id, label = out.label.resolution, queries = out.queries, "labeled");
                for step in &out.record.steps {
                    let e = sums.entry(step.r).or_default();
                    e.0 += 1;
                    e.1 += step.utility.value();
                }
                summary.model_calls += out.queries;
                *summary.label_histogram.entry(out.label.resolution).or_default() += 1;
                summary.labeled += 1;
                sample.rollout = Some(out.record);
                sample.label = Some(out.label);
                sample.status = SampleStatus::Labeled;
                sample.error = None;
            }
            Err(e) => {
                warn!(id = %sample.id, error = %e, "rollout failed");
                summary.failed += 1;
                sample.rollout = None;
                sample.label = None;
                sample.status = SampleStatus::Failed;
                sample.error = Some(e.to_string());
            }
        }
        store.append(&sample)?;
    }
    summary.utility_by_resolution = sums
        .into_iter()
        .map(|(r, (n, total))| (r, UtilityStats { count: n, mean: total / n as f64 }))
        .collect();
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(u: &[f64]) -> u32 {
        label_from_utilities(u, &ResolutionMenu::default_menu(), &LabelingConfig::default()).unwrap().resolution
    }

    #[test]
    fn worked_examples() {
        assert_eq!(label(&[1.0, 1.0, 1.0]), 384);
        assert_eq!(label(&[0.7, 1.0, 1.0]), 768);
        assert_eq!(label(&[0.0, 0.65, 0.93]), 1024);
        assert_eq!(label(&[0.86, 1.0, 1.0]), 768);
        assert_eq!(label(&[0.5, 0.6, 0.7]), 1024);
    }

    #[test]
    fn errors() {
        let menu = ResolutionMenu::default_menu();
        let cfg = LabelingConfig::default();
        assert_eq!(
            label_from_utilities(&[1.0, 1.0], &menu, &cfg),
            Err(LabelError::LengthMismatch { got: 2, expected: 3 })
        );
        assert_eq!(label_from_utilities(&[1.0, 1.2, 0.0], &menu, &cfg), Err(LabelError::UtilityOutOfRange(1.2)));
    }

    #[test]
    fn prefix_decisions() {
        let cfg = LabelingConfig::default();
        assert_eq!(decided_index(&[1.0], 3, &cfg), Some(0));
        assert_eq!(decided_index(&[0.0, 1.0], 3, &cfg), Some(1));
        // 0.86 could still be overtaken by more than delta
        assert_eq!(decided_index(&[0.86], 3, &cfg), None);
        // and a later 0.9 must not short-circuit index 0, which still qualifies
        assert_eq!(decided_index(&[0.86, 0.9], 3, &cfg), None);
        assert_eq!(decided_index(&[0.86, 0.9, 0.9], 3, &cfg), Some(0));
        assert_eq!(decided_index(&[0.2, 0.3], 3, &cfg), None);
    }

    #[test]
    fn config_validation() {
        assert!(LabelingConfig::default().validate().is_ok());
        assert!(LabelingConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LabelingConfig { delta: 1.0, ..Default::default() }.validate().is_err());
        let parsed: LabelingConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, LabelingConfig::default());
    }

    #[test]
    fn label_serde_keys() {
        let l = SufficiencyLabel { resolution: 768, class_index: 1 };
        assert_eq!(serde_json::to_string(&l).unwrap(), r#"{"r":768,"k":1}"#);
    }
}
