use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{info, warn};

use resroute_core::cost::{estimate_text_tokens, run_report, EvalRecord, ModelProfile};
use resroute_core::imageops::{ImageDims, RenderCache};
use resroute_core::routing::{check_mode, decide, RoutingMode};
use resroute_core::store::SampleRecord;
use resroute_core::vlm::{DecodeParams, VlmClient, VlmRequest};
use resroute_core::{FeatureVector, Head};
use resroute_gateway::{FeatureClient, Upstream};

use crate::commands::{ensure_parent, load_head, load_samples, stored_features, write_json};
use crate::error::{invalid, runtime, CliError};
use crate::manifest::RunManifest;
use crate::Context;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Samples to evaluate (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    /// Per-sample results (JSONL); the summary goes to `<out>.summary.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// continuous, discrete, passthrough or fixed:<r>.
    #[arg(long, default_value = "continuous")]
    pub mode: RoutingMode,
    /// Cost profile name or file; defaults to the configured one.
    #[arg(long)]
    pub profile: Option<String>,
    /// Simulator spec to use as the target model instead of `[target_vlm]`.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub parallelism: usize,
}

/// One evaluated sample. A superset of the cost report's input record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLine {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    pub mode: RoutingMode,
    pub r_continuous: f64,
    pub r: u32,
    pub dims_used: ImageDims,
    pub dims_native: ImageDims,
    pub text_tokens: u64,
    pub visual_tokens: u64,
    pub flops: f64,
    pub baseline_flops: f64,
    pub utility: f64,
    pub answer: String,
}

impl EvalLine {
    pub fn record(&self) -> EvalRecord {
        EvalRecord {
            id: self.id.clone(),
            dims_used: self.dims_used,
            dims_native: self.dims_native,
            text_tokens: self.text_tokens,
            utility: self.utility,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagStats {
    pub samples: usize,
    pub mean_utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mode: RoutingMode,
    pub profile: String,
    pub samples: usize,
    pub failed: usize,
    pub mean_utility: f64,
    /// Mean over tags of each tag's mean utility.
    pub macro_utility: f64,
    pub per_tag: BTreeMap<String, TagStats>,
    pub total_visual_tokens: u64,
    pub total_flops: f64,
    pub total_baseline_flops: f64,
    pub savings_pct: f64,
}

pub const UNTAGGED: &str = "untagged";

pub fn summarize(
    lines: &[EvalLine],
    failed: usize,
    mode: RoutingMode,
    profile: &ModelProfile,
) -> Result<EvalSummary, CliError> {
    let records: Vec<EvalRecord> = lines.iter().map(EvalLine::record).collect();
    let report = run_report(&records, profile).map_err(invalid)?;
    let mut sums: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for l in lines {
        let e = sums.entry(l.tag.clone().unwrap_or_else(|| UNTAGGED.into())).or_default();
        e.0 += 1;
        e.1 += l.utility;
    }
    let per_tag: BTreeMap<String, TagStats> = sums
        .into_iter()
        .map(|(tag, (n, total))| (tag, TagStats { samples: n, mean_utility: total / n as f64 }))
        .collect();
    let macro_utility = per_tag.values().map(|t| t.mean_utility).sum::<f64>() / per_tag.len() as f64;
    Ok(EvalSummary {
        mode,
        profile: report.profile,
        samples: report.samples,
        failed,
        mean_utility: report.mean_utility,
        macro_utility,
        per_tag,
        total_visual_tokens: report.total_visual_tokens,
        total_flops: report.total_flops,
        total_baseline_flops: report.total_baseline_flops,
        savings_pct: report.savings_pct,
    })
}

struct Evaluator<'a> {
    head: &'a Head,
    supported: &'a [u32],
    mode: RoutingMode,
    profile: &'a ModelProfile,
    renderer: Arc<RenderCache>,
    features: Option<FeatureClient>,
    vlm: &'a dyn VlmClient,
    decode: DecodeParams,
    cheap_side: u32,
}

impl Evaluator<'_> {
    async fn render(&self, image_ref: &str, r: u32) -> Result<(ImageDims, Arc<Vec<u8>>), String> {
        let cache = self.renderer.clone();
        let image_ref = image_ref.to_owned();
        tokio::task::spawn_blocking(move || cache.render(&image_ref, r))
            .await
            .map_err(|e| e.to_string())?
            .map_err(|e| e.to_string())
    }

    async fn features(&self, s: &SampleRecord) -> Result<Option<FeatureVector<f64>>, String> {
        if !self.mode.needs_features() {
            return Ok(None);
        }
        if let Some(z) = stored_features(s).map_err(|e| e.to_string())? {
            return Ok(Some(z));
        }
        let client = self.features.as_ref().ok_or("no stored features and no feature service")?;
        let (_, cheap) = self.render(&s.image, self.cheap_side).await?;
        let v = client.features(&cheap, &s.query, self.head.dim()).await.map_err(|e| e.to_string())?;
        FeatureVector::new(v).map(Some).map_err(|e| e.to_string())
    }

    async fn one(&self, s: &SampleRecord) -> Result<EvalLine, String> {
        let cache = self.renderer.clone();
        let image_ref = s.image.clone();
        let source = tokio::task::spawn_blocking(move || cache.source(&image_ref))
            .await
            .map_err(|e| e.to_string())?
            .map_err(|e| e.to_string())?;
        let native = ImageDims::of(&source);
        let z = self.features(s).await?;
        let decision = decide(self.head, self.supported, self.mode, native, z.as_ref()).map_err(|e| e.to_string())?;
        // the native view is sent as the original file, as the gateway does
        let bytes = if decision.dims == native {
            std::fs::read(&s.image).map_err(|e| format!("{}: {e}", s.image))?
        } else {
            let (dims, bytes) = self.render(&s.image, decision.r).await?;
            debug_assert_eq!(dims, decision.dims);
            bytes.as_ref().clone()
        };
        let mut req = VlmRequest::new(bytes, s.query.clone()).with_sample_id(&s.id);
        req.decode = self.decode;
        let resp = self.vlm.chat(&req).await.map_err(|e| e.to_string())?;
        let utility = s.metric.score(&resp.answer, &s.gts).map_err(|e| e.to_string())?.value();
        let text_tokens = estimate_text_tokens(&s.query);
        Ok(EvalLine {
            id: s.id.clone(),
            tag: s.tag.clone(),
            mode: decision.mode,
            r_continuous: decision.r_continuous,
            r: decision.r,
            dims_used: decision.dims,
            dims_native: native,
            text_tokens,
            visual_tokens: self.profile.tokens(decision.dims),
            flops: self.profile.flops(decision.dims, text_tokens),
            baseline_flops: self.profile.flops(native, text_tokens),
            utility,
            answer: resp.answer,
        })
    }
}

pub fn summary_path(out: &Path) -> PathBuf {
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{name}.summary.json"))
}

pub async fn run(ctx: &Context, a: Args) -> Result<Value, CliError> {
    let mut manifest = RunManifest::begin(ctx, "eval");
    manifest.input(&a.data);
    manifest.input(&a.head);
    let head = load_head(&a.head)?;
    if !head.menu().same_entries(&ctx.config.menu) {
        return Err(invalid(format!(
            "head menu {:?} differs from configured menu {:?}",
            head.menu().entries(),
            ctx.config.menu.entries()
        )));
    }
    let profile = ctx.config.profile(a.profile.as_deref())?;
    let supported = ctx.config.supported(&profile);
    check_mode(a.mode, &supported).map_err(invalid)?;
    let target = ctx.config.target(a.spec.as_deref())?;
    if let Some(spec) = &a.spec {
        manifest.input(spec);
    }
    let upstream = Upstream::from_target(&target).map_err(invalid)?;
    let samples = load_samples(&a.data)?;
    let features = match &ctx.config.feature_endpoint {
        Some(e) => Some(FeatureClient::new(e.clone()).map_err(runtime)?),
        None => None,
    };
    if a.mode.needs_features() && features.is_none() {
        if let Some(s) = samples.iter().find(|s| s.features.is_none()) {
            return Err(invalid(format!("sample `{}` has no stored features and no [feature_endpoint] is configured", s.id)));
        }
    }

    let ev = Evaluator {
        head: &head,
        supported: &supported,
        mode: a.mode,
        profile: &profile,
        renderer: Arc::new(RenderCache::new(ctx.config.encode, 64)),
        features,
        vlm: upstream.client(),
        decode: ctx.config.decode(&target),
        cheap_side: ctx.config.menu.min(),
    };
    let results: Vec<(String, Result<EvalLine, String>)> = stream::iter(&samples)
        .map(|s| async { (s.id.clone(), ev.one(s).await) })
        .buffered(a.parallelism.max(1))
        .collect()
        .await;

    ensure_parent(&a.out)?;
    let file = std::fs::File::create(&a.out).map_err(|e| runtime(format!("{}: {e}", a.out.display())))?;
    let mut w = std::io::BufWriter::new(file);
    let mut lines = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(line) => {
                let text = serde_json::to_string(&line).map_err(runtime)?;
                writeln!(w, "{text}").map_err(runtime)?;
                lines.push(line);
            }
            Err(e) => {
                warn!(id = %id, error = %e, "sample failed");
                failures.push(json!({"id": id, "error": e}));
            }
        }
    }
    w.flush().map_err(runtime)?;
    if lines.is_empty() {
        return Err(runtime(format!("all {} samples failed; first error: {}", failures.len(), failures[0])));
    }

    let summary = summarize(&lines, failures.len(), a.mode, &profile)?;
    info!(mode = %a.mode, macro_utility = summary.macro_utility, savings_pct = summary.savings_pct, "evaluation finished");
    let summary_file = summary_path(&a.out);
    write_json(&summary_file, &summary)?;
    let mut summary_json = serde_json::to_value(&summary).map_err(runtime)?;
    if !failures.is_empty() {
        summary_json["failures"] = Value::Array(failures.clone());
    }
    let manifest_path = manifest.finish(&[&a.out, &summary_file], &a.out, summary_json.clone())?;
    if !failures.is_empty() {
        return Err(runtime(format!("{} of {} samples failed", failures.len(), samples.len())));
    }
    Ok(json!({"summary": summary_json, "run": a.out, "manifest": manifest_path}))
}
