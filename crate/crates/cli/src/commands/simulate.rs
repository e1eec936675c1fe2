use std::path::PathBuf;

use serde_json::{json, Value};

use resroute_core::imageops::ImageDims;
use resroute_core::synth::{self, SynthConfig, SynthError};

use crate::error::{invalid, runtime, CliError};
use crate::manifest::RunManifest;
use crate::Context;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Number of samples.
    #[arg(long)]
    pub n: usize,
    /// Share of samples per sufficient resolution, e.g. `384:0.7,768:0.2,1024:0.1`.
    #[arg(long, default_value = "384:0.7,768:0.2,1024:0.1")]
    pub mix: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub feature_dim: usize,
    /// Native image size as WIDTHxHEIGHT.
    #[arg(long, default_value = "1024x1024", value_parser = parse_dims)]
    pub native: ImageDims,
    /// Distinct source images shared by the samples.
    #[arg(long, default_value_t = 8)]
    pub images: usize,
    /// Distance between class feature clusters in noise standard deviations.
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,
}

fn parse_dims(s: &str) -> Result<ImageDims, String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w = w.trim().parse().map_err(|_| format!("bad width `{w}`"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height `{h}`"))?;
    ImageDims::new(w, h).map_err(|e| e.to_string())
}

pub fn run(ctx: &Context, a: Args) -> Result<Value, CliError> {
    let manifest = RunManifest::begin(ctx, "simulate");
    let mix = synth::parse_mix(&a.mix).map_err(invalid)?;
    if a.n == 0 || a.feature_dim == 0 {
        return Err(invalid("--n and --feature-dim must be at least 1"));
    }
    if !(a.separation > 0.0 && a.separation.is_finite()) {
        return Err(invalid(format!("--separation {} must be positive", a.separation)));
    }
    let cfg = SynthConfig {
        feature_dim: a.feature_dim,
        native: a.native,
        images: a.images,
        separation_sigmas: a.separation,
        ..SynthConfig::new(a.n, mix, ctx.seed)
    };
    let out = synth::simulate(&cfg, &ctx.config.menu, &a.out).map_err(|e| match e {
        SynthError::BadMix(_) | SynthError::EmptyDataset => invalid(e),
        _ => runtime(e),
    })?;
    let summary = json!({
        "samples": out.samples,
        "spec": out.spec,
        "features": out.features,
        "planted": out.planted,
    });
    let outputs = [out.samples.as_path(), out.spec.as_path(), out.features.as_path()];
    let manifest_path = manifest.finish(&outputs, &a.out, summary.clone())?;
    Ok(json!({"summary": summary, "manifest": manifest_path}))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_parse() {
        assert_eq!(parse_dims("640x480").unwrap(), ImageDims { width: 640, height: 480 });
        assert!(parse_dims("640").is_err());
        assert!(parse_dims("0x10").is_err());
    }
}
