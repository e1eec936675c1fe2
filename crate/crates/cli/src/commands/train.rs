use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tracing::{info, warn};

use resroute_core::selector::{evaluate, train_head};
use resroute_core::store::{self, SampleRecord, SampleStatus};
use resroute_core::{FeatureVector, SufficiencyLabel};

use crate::commands::{ensure_parent, load_samples, stored_features};
use crate::error::{invalid, runtime, CliError};
use crate::manifest::RunManifest;
use crate::Context;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Labeled samples carrying feature vectors (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the trained head.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub smoothing: Option<f64>,
    /// Fraction of usable samples held out for evaluation.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    /// Held-out samples are written here (default: `heldout.jsonl` beside the head).
    #[arg(long)]
    pub heldout_out: Option<PathBuf>,
}

type Example = (FeatureVector<f64>, SufficiencyLabel);

fn is_usable(r: &SampleRecord) -> bool {
    r.status == SampleStatus::Labeled && r.label.is_some() && r.features.is_some()
}

fn examples(records: &[SampleRecord]) -> Result<Vec<Example>, CliError> {
    records
        .iter()
        .map(|r| {
            let z = stored_features(r)?.expect("filtered to records with features");
            Ok((z, r.label.expect("filtered to labeled records")))
        })
        .collect()
}

pub fn run(ctx: &Context, a: Args) -> Result<Value, CliError> {
    let mut manifest = RunManifest::begin(ctx, "train");
    manifest.input(&a.data);
    if !(0.0..1.0).contains(&a.holdout) {
        return Err(invalid(format!("--holdout {} not in [0, 1)", a.holdout)));
    }
    let mut cfg = ctx.config.train.clone();
    cfg.seed = ctx.seed_or(cfg.seed);
    manifest.seed = cfg.seed;
    cfg.learning_rate = a.lr.unwrap_or(cfg.learning_rate);
    cfg.batch_size = a.batch.unwrap_or(cfg.batch_size);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.label_smoothing = a.smoothing.unwrap_or(cfg.label_smoothing);

    let mut records = load_samples(&a.data)?;
    let total = records.len();
    records.retain(is_usable);
    let skipped = total - records.len();
    if skipped > 0 {
        warn!(skipped, "samples without a label or features are not used");
    }
    if records.is_empty() {
        return Err(invalid(format!("{}: no labeled samples with features", a.data.display())));
    }

    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_held = (records.len() as f64 * a.holdout).round() as usize;
    let mut held_idx = order[..n_held].to_vec();
    held_idx.sort_unstable();
    let mut is_held = vec![false; records.len()];
    for &i in &held_idx {
        is_held[i] = true;
    }
    let (held, train): (Vec<_>, Vec<_>) = records.into_iter().zip(is_held).partition(|(_, h)| *h);
    let held: Vec<SampleRecord> = held.into_iter().map(|(r, _)| r).collect();
    let train: Vec<SampleRecord> = train.into_iter().map(|(r, _)| r).collect();
    if train.is_empty() {
        return Err(invalid("--holdout leaves no training samples"));
    }

    let train_data = examples(&train)?;
    let (head, report) = train_head(&train_data, &ctx.config.menu, &cfg).map_err(invalid)?;
    let heldout_stats = if held.is_empty() {
        None
    } else {
        Some(evaluate(&head, &examples(&held)?).map_err(invalid)?)
    };
    info!(train_accuracy = report.train_accuracy, heldout = ?heldout_stats.as_ref().map(|s| s.accuracy), "training finished");

    ensure_parent(&a.out)?;
    head.save(&a.out).map_err(|e| runtime(format!("{}: {e}", a.out.display())))?;
    let heldout_path = a.heldout_out.clone().unwrap_or_else(|| a.out.with_file_name("heldout.jsonl"));
    store::write_all(&heldout_path, &held).map_err(runtime)?;

    let summary = json!({
        "samples": total,
        "skipped": skipped,
        "train_samples": train.len(),
        "heldout_samples": held.len(),
        "train_accuracy": report.train_accuracy,
        "heldout_accuracy": heldout_stats.as_ref().map(|s| s.accuracy),
        "heldout_mean_confidence": heldout_stats.as_ref().map(|s| s.mean_confidence),
        "epoch_losses": report.epoch_losses,
        "data_checksum": report.data_checksum,
        "train_config": cfg,
    });
    let manifest_path = manifest.finish(&[&a.out, &heldout_path], &a.out, summary.clone())?;
    Ok(json!({"summary": summary, "head": a.out, "heldout": heldout_path, "manifest": manifest_path}))
}
