//! Visual-token counts, prefill FLOPs estimates and savings accounting.
//!
//! Prefill compute is estimated as `2 * params * (visual + text tokens)`. Only
//! relative deltas are meaningful; the parameter count cancels in ratios.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageops::ImageDims;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("baseline must be positive, got {0}")]
    NonpositiveBaseline(f64),
    #[error("no evaluation records")]
    EmptyEvaluation,
    #[error("invalid cost scheme: {0}")]
    BadScheme(String),
    #[error("unknown profile `{0}`")]
    UnknownProfile(String),
    #[error("cannot load profile {0}: {1}")]
    Load(String, String),
}

/// How a model turns an image into visual tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostScheme {
    /// Non-overlapping patches, `merge x merge` patches fused into one token.
    PatchGrid { patch_size: u32, merge_factor: u32 },
    /// Fixed-size tiles plus a global thumbnail view.
    Tiled { tile_size: u32, tokens_per_tile: u64, base_tokens: u64 },
    /// Token count independent of resolution.
    Fixed { fixed_tokens: u64 },
}

impl CostScheme {
    pub fn validate(&self) -> Result<(), CostError> {
        let ok = match self {
            CostScheme::PatchGrid { patch_size, merge_factor } => *patch_size > 0 && *merge_factor > 0,
            CostScheme::Tiled { tile_size, tokens_per_tile, .. } => *tile_size > 0 && *tokens_per_tile > 0,
            CostScheme::Fixed { fixed_tokens } => *fixed_tokens > 0,
        };
        if ok { Ok(()) } else { Err(CostError::BadScheme(format!("{self:?}"))) }
    }
}

fn ceil_div(a: u32, b: u32) -> u64 {
    a.div_ceil(b) as u64
}

pub fn visual_tokens(scheme: &CostScheme, dims: ImageDims) -> u64 {
    match *scheme {
        CostScheme::PatchGrid { patch_size, merge_factor } => {
            let cell = patch_size * merge_factor;
            ceil_div(dims.width, cell) * ceil_div(dims.height, cell)
        }
        CostScheme::Tiled { tile_size, tokens_per_tile, base_tokens } => {
            base_tokens + ceil_div(dims.width, tile_size) * ceil_div(dims.height, tile_size) * tokens_per_tile
        }
        CostScheme::Fixed { fixed_tokens } => fixed_tokens,
    }
}

pub fn prefill_flops(visual_tokens: u64, text_tokens: u64, params: u64) -> f64 {
    2.0 * params as f64 * (visual_tokens + text_tokens) as f64
}

/// Percentage change from `baseline` to `adaptive`; negative means savings.
pub fn relative_savings(baseline: f64, adaptive: f64) -> Result<f64, CostError> {
    if !(baseline > 0.0) {
        return Err(CostError::NonpositiveBaseline(baseline));
    }
    Ok(100.0 * (adaptive - baseline) / baseline)
}

/// Text tokens when the model reports none: one per four characters.
pub fn estimate_text_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// Accounting profile for one target model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub name: String,
    pub parameter_count: u64,
    pub scheme: CostScheme,
    #[serde(default)]
    pub supported_sizes: Option<crate::menu::SupportedSizes>,
    /// API price per million input tokens, for dollar-cost reports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usd_per_million_input_tokens: Option<f64>,
}

impl ModelProfile {
    pub fn validate(&self) -> Result<(), CostError> {
        if self.parameter_count == 0 {
            return Err(CostError::BadScheme("parameter_count must be positive".into()));
        }
        self.scheme.validate()
    }

    pub fn supported(&self) -> Option<Vec<u32>> {
        self.supported_sizes.as_ref().map(|s| s.expand())
    }

    pub fn tokens(&self, dims: ImageDims) -> u64 {
        visual_tokens(&self.scheme, dims)
    }

    pub fn flops(&self, dims: ImageDims, text_tokens: u64) -> f64 {
        prefill_flops(self.tokens(dims), text_tokens, self.parameter_count)
    }

    /// Built-in approximations of three token regimes.
    pub fn builtin(name: &str) -> Result<Self, CostError> {
        use crate::menu::SupportedSizes;
        let p = match name {
            // dynamic-resolution ViT, 14px patches merged 2x2; accepts sides on a 32px grid
            "patch-grid" => ModelProfile {
                name: name.into(),
                parameter_count: 7_000_000_000,
                scheme: CostScheme::PatchGrid { patch_size: 14, merge_factor: 2 },
                supported_sizes: Some(SupportedSizes::Grid { start: 384, stop: 1024, step: 32 }),
                usd_per_million_input_tokens: None,
            },
            // AnyRes-style tiling at 448px with a thumbnail
            "tiled" => ModelProfile {
                name: name.into(),
                parameter_count: 8_000_000_000,
                scheme: CostScheme::Tiled { tile_size: 448, tokens_per_tile: 256, base_tokens: 256 },
                supported_sizes: None,
                usd_per_million_input_tokens: None,
            },
            "fixed" => ModelProfile {
                name: name.into(),
                parameter_count: 2_000_000_000,
                scheme: CostScheme::Fixed { fixed_tokens: 729 },
                supported_sizes: None,
                usd_per_million_input_tokens: None,
            },
            other => return Err(CostError::UnknownProfile(other.into())),
        };
        Ok(p)
    }

    pub const BUILTIN_NAMES: [&'static str; 3] = ["patch-grid", "tiled", "fixed"];

    /// A built-in name, or a path to a JSON profile file.
    pub fn resolve(name_or_path: &str) -> Result<Self, CostError> {
        if let Ok(p) = Self::builtin(name_or_path) {
            return Ok(p);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(CostError::UnknownProfile(name_or_path.into()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| CostError::Load(name_or_path.into(), e.to_string()))?;
        let profile: ModelProfile = serde_json::from_str(&text)
            .map_err(|e| CostError::Load(name_or_path.into(), e.to_string()))?;
        profile.validate()?;
        Ok(profile)
    }
}

/// One evaluated sample, as consumed by [`run_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    #[serde(default)]
    pub id: String,
    pub dims_used: ImageDims,
    pub dims_native: ImageDims,
    pub text_tokens: u64,
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub utility: f64,
    pub visual_tokens: u64,
    pub baseline_visual_tokens: u64,
    pub text_tokens: u64,
    pub flops: f64,
    pub baseline_flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub profile: String,
    pub flops_formula: String,
    pub samples: usize,
    pub mean_utility: f64,
    pub total_visual_tokens: u64,
    pub total_baseline_visual_tokens: u64,
    pub mean_visual_tokens: f64,
    pub total_flops: f64,
    pub total_baseline_flops: f64,
    pub mean_flops: f64,
    /// Percentage change against pricing every sample at native size.
    pub savings_pct: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_usd: Option<f64>,
    pub rows: Vec<ReportRow>,
}

pub const FLOPS_FORMULA: &str = "prefill FLOPs ~= 2 * params * (visual_tokens + text_tokens)";

/// Aggregates an evaluation run and compares it with a native-resolution baseline.
pub fn run_report(records: &[EvalRecord], profile: &ModelProfile) -> Result<CostReport, CostError> {
    if records.is_empty() {
        return Err(CostError::EmptyEvaluation);
    }
    let rows: Vec<ReportRow> = records
        .iter()
        .map(|r| {
            let vt = profile.tokens(r.dims_used);
            let bvt = profile.tokens(r.dims_native);
            ReportRow {
                id: r.id.clone(),
                utility: r.utility,
                visual_tokens: vt,
                baseline_visual_tokens: bvt,
                text_tokens: r.text_tokens,
                flops: prefill_flops(vt, r.text_tokens, profile.parameter_count),
                baseline_flops: prefill_flops(bvt, r.text_tokens, profile.parameter_count),
            }
        })
        .collect();
    let n = rows.len() as f64;
    let total_flops: f64 = rows.iter().map(|r| r.flops).sum();
    let total_baseline_flops: f64 = rows.iter().map(|r| r.baseline_flops).sum();
    let total_visual_tokens: u64 = rows.iter().map(|r| r.visual_tokens).sum();
    let total_baseline_visual_tokens: u64 = rows.iter().map(|r| r.baseline_visual_tokens).sum();
    let price = |tokens: u64| profile.usd_per_million_input_tokens.map(|p| p * tokens as f64 / 1e6);
    let text: u64 = rows.iter().map(|r| r.text_tokens).sum();
    Ok(CostReport {
        profile: profile.name.clone(),
        flops_formula: FLOPS_FORMULA.into(),
        samples: rows.len(),
        mean_utility: rows.iter().map(|r| r.utility).sum::<f64>() / n,
        total_visual_tokens,
        total_baseline_visual_tokens,
        mean_visual_tokens: total_visual_tokens as f64 / n,
        total_flops,
        total_baseline_flops,
        mean_flops: total_flops / n,
        savings_pct: relative_savings(total_baseline_flops, total_flops)?,
        usd: price(total_visual_tokens + text),
        baseline_usd: price(total_baseline_visual_tokens + text),
        rows,
    })
}

impl CostReport {
    /// Aligned text table of the aggregates.
    pub fn render_summary(&self, label: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {} ({})", self.profile, self.flops_formula);
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>10} {:>14} {:>14} {:>10}",
            "run", "samples", "utility", "mean tokens", "mean TFLOPs", "FLOPs"
        );
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>10.4} {:>14.1} {:>14.3} {:>9.1}%",
            label,
            self.samples,
            self.mean_utility,
            self.mean_visual_tokens,
            self.mean_flops / 1e12,
            self.savings_pct
        );
        out
    }
}

/// One point of a utility-vs-compute plot.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffPoint {
    pub label: String,
    pub mean_flops: f64,
    pub utility: f64,
}

/// Scatter plot of utility against mean prefill TFLOPs.
pub fn tradeoff_svg(points: &[TradeoffPoint]) -> String {
    let (w, h, pad) = (640.0, 420.0, 60.0);
    let xs: Vec<f64> = points.iter().map(|p| p.mean_flops / 1e12).collect();
    let x_max = xs.iter().copied().fold(0.0, f64::max).max(1e-9) * 1.1;
    let (y_lo, y_hi) = points.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p.utility), hi.max(p.utility)));
    let (y_lo, y_hi) = if points.is_empty() { (0.0, 1.0) } else { ((y_lo - 0.05).max(0.0), (y_hi + 0.05).min(1.05)) };
    let sx = |x: f64| pad + x / x_max * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y_lo) / (y_hi - y_lo).max(1e-9) * (h - 2.0 * pad);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#,
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">mean prefill TFLOPs (estimate)</text>"#, w / 2.0, h - 15.0);
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">utility</text>"#,
        h / 2.0,
        h / 2.0
    );
    for i in 0..=4 {
        let yv = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let xv = x_max * i as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{yv:.2}</text>"#, pad - 5.0, sy(yv) + 4.0);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{xv:.2}</text>"#, sx(xv), h - pad + 16.0);
    }
    for (p, x) in points.iter().zip(&xs) {
        let (cx, cy) = (sx(*x), sy(p.utility));
        let _ = writeln!(svg, r#"<circle cx="{cx:.1}" cy="{cy:.1}" r="5" fill="steelblue"/>"#);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, cx + 8.0, cy - 6.0, xml_escape(&p.label));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
