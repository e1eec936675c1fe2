use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use resroute_core::cost::{run_report, tradeoff_svg, CostReport, EvalRecord, TradeoffPoint, FLOPS_FORMULA};

use crate::commands::write_json;
use crate::error::{invalid, runtime, CliError};
use crate::manifest::RunManifest;
use crate::Context;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Evaluation run (JSONL); repeat to compare runs.
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    /// Display name per run, in `--run` order (default: file stem).
    #[arg(long = "label")]
    pub labels: Vec<String>,
    /// Cost profile name or file; defaults to the configured one.
    #[arg(long)]
    pub profile: Option<String>,
    /// Utility-vs-compute scatter plot.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct LabeledReport {
    pub label: String,
    pub run: PathBuf,
    #[serde(flatten)]
    pub report: CostReport,
}

pub fn read_run(path: &Path) -> Result<Vec<EvalRecord>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// One row per run: score and compute change against native resolution.
pub fn render_table(reports: &[LabeledReport]) -> String {
    let mut out = String::new();
    let profile = reports.first().map_or("", |r| r.report.profile.as_str());
    let _ = writeln!(out, "# profile {profile}; {FLOPS_FORMULA}");
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(3);
    let _ = writeln!(
        out,
        "{:<width$}  {:>7}  {:>8}  {:>11}  {:>11}  {:>8}",
        "run", "samples", "utility", "mean tokens", "mean TFLOPs", "FLOPs"
    );
    for r in reports {
        let c = &r.report;
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>8.4}  {:>11.1}  {:>11.4}  {:>+7.1}%",
            r.label,
            c.samples,
            c.mean_utility,
            c.mean_visual_tokens,
            c.mean_flops / 1e12,
            c.savings_pct
        );
    }
    out
}

pub fn run(ctx: &Context, a: Args) -> Result<Value, CliError> {
    let mut manifest = RunManifest::begin(ctx, "report");
    if !a.labels.is_empty() && a.labels.len() != a.runs.len() {
        return Err(invalid(format!("{} labels for {} runs", a.labels.len(), a.runs.len())));
    }
    let profile = ctx.config.profile(a.profile.as_deref())?;
    let mut reports = Vec::with_capacity(a.runs.len());
    for (i, run) in a.runs.iter().enumerate() {
        manifest.input(run);
        let records = read_run(run)?;
        let report = run_report(&records, &profile).map_err(|e| invalid(format!("{}: {e}", run.display())))?;
        let label = a.labels.get(i).cloned().unwrap_or_else(|| {
            run.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("run{i}"))
        });
        reports.push(LabeledReport { label, run: run.clone(), report });
    }
    let _ = std::io::stdout().lock().write_all(render_table(&reports).as_bytes());

    let mut outputs: Vec<&Path> = Vec::new();
    if let Some(p) = &a.json {
        write_json(p, &json!({"profile": profile.name, "flops_formula": FLOPS_FORMULA, "runs": reports}))?;
        outputs.push(p);
    }
    if let Some(p) = &a.svg {
        let points: Vec<TradeoffPoint> = reports
            .iter()
            .map(|r| TradeoffPoint { label: r.label.clone(), mean_flops: r.report.mean_flops, utility: r.report.mean_utility })
            .collect();
        std::fs::write(p, tradeoff_svg(&points)).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
        outputs.push(p);
    }
    // without file outputs the manifest goes beside the first run
    let primary = match outputs.first() {
        Some(p) => p.to_path_buf(),
        None => {
            let first = &a.runs[0];
            let name = first.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            first.with_file_name(format!("{name}.report"))
        }
    };
    let rows: Vec<Value> = reports
        .iter()
        .map(|r| json!({"label": r.label, "utility": r.report.mean_utility, "savings_pct": r.report.savings_pct}))
        .collect();
    let summary = json!({"profile": profile.name, "runs": rows});
    let manifest_path = manifest.finish(&outputs, &primary, summary.clone())?;
    Ok(json!({"summary": summary, "manifest": manifest_path}))
}
