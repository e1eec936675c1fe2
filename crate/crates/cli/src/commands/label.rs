use std::path::PathBuf;
use std::sync::Arc;

use serde_json::{json, Value};
use tracing::info;

use resroute_core::imageops::RenderCache;
use resroute_core::labeler::{label_dataset, LabelRun};
use resroute_core::store::DatasetWriter;
use resroute_gateway::Upstream;

use crate::commands::{ensure_parent, load_samples};
use crate::error::{invalid, runtime, CliError};
use crate::manifest::RunManifest;
use crate::Context;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Samples to label (JSONL).
    #[arg(long)]
    pub input: PathBuf,
    /// Labeled store; samples already present are skipped.
    #[arg(long)]
    pub output: PathBuf,
    /// Samples rolled out concurrently.
    #[arg(long, default_value_t = 8)]
    pub parallelism: usize,
    /// Evaluate every menu resolution even when the label is already decided.
    #[arg(long)]
    pub no_early_exit: bool,
    /// Simulator spec to use as the target model instead of `[target_vlm]`.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

pub async fn run(ctx: &Context, a: Args) -> Result<Value, CliError> {
    let mut manifest = RunManifest::begin(ctx, "label");
    manifest.input(&a.input);
    let target = ctx.config.target(a.spec.as_deref())?;
    if let Some(spec) = &a.spec {
        manifest.input(spec);
    }
    let upstream = Upstream::from_target(&target).map_err(invalid)?;
    let samples = load_samples(&a.input)?;
    ensure_parent(&a.output)?;
    let mut store = DatasetWriter::open(&a.output).map_err(invalid)?;

    let mut cfg = ctx.config.labeling;
    cfg.early_exit &= !a.no_early_exit;
    let run = LabelRun {
        menu: &ctx.config.menu,
        cfg: &cfg,
        vlm: upstream.client(),
        renderer: Arc::new(RenderCache::new(ctx.config.encode, 64)),
        decode: ctx.config.decode(&target),
        parallelism: a.parallelism,
    };
    let summary = label_dataset(samples, run, &mut store).await.map_err(runtime)?;
    store.sync().map_err(runtime)?;
    info!(labeled = summary.labeled, failed = summary.failed, skipped = summary.skipped, "labeling finished");

    let summary_json = serde_json::to_value(&summary).map_err(runtime)?;
    let manifest_path = manifest.finish(&[&a.output], &a.output, summary_json.clone())?;
    if summary.failed > 0 {
        return Err(runtime(format!(
            "{} of {} samples failed; see `error` fields in {}",
            summary.failed,
            summary.failed + summary.labeled,
            a.output.display()
        )));
    }
    Ok(json!({"summary": summary_json, "manifest": manifest_path}))
}
