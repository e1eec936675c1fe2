use std::path::PathBuf;

use serde_json::{json, Value};

use resroute_core::imageops;
use resroute_core::FeatureVector;
use resroute_gateway::FeatureClient;

use crate::commands::{load_head, write_json};
use crate::error::{invalid, runtime, CliError};
use crate::manifest::RunManifest;
use crate::Context;

#[derive(Debug, clap::Args)]
#[group(id = "source", required = true, multiple = false, args = ["features", "image"])]
pub struct Args {
    #[arg(long)]
    pub head: PathBuf,
    /// Feature vector as comma- or space-separated numbers (brackets allowed).
    #[arg(long)]
    pub features: Option<String>,
    /// Image to embed through the configured feature service.
    #[arg(long, requires = "query")]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub query: Option<String>,
    /// Also write the selection as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn parse_vector(text: &str) -> Result<Vec<f64>, String> {
    text.trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect()
}

pub async fn run(ctx: &Context, a: Args) -> Result<Value, CliError> {
    let mut manifest = RunManifest::begin(ctx, "select");
    manifest.input(&a.head);
    let head = load_head(&a.head)?;
    let profile = ctx.config.profile(None)?;
    let supported = ctx.config.supported(&profile);

    let values = match (&a.features, &a.image, &a.query) {
        (Some(text), _, _) => parse_vector(text).map_err(invalid)?,
        (None, Some(image), Some(query)) => {
            manifest.input(image);
            let endpoint = ctx
                .config
                .feature_endpoint
                .clone()
                .ok_or_else(|| invalid("--image needs [feature_endpoint] in the configuration"))?;
            let img = imageops::load(image).map_err(invalid)?;
            let (_, cheap) = imageops::render_at(&img, ctx.config.menu.min(), ctx.config.encode).map_err(runtime)?;
            let client = FeatureClient::new(endpoint).map_err(runtime)?;
            client.features(&cheap, query, head.dim()).await.map_err(runtime)?
        }
        _ => return Err(invalid("pass --features, or --image with --query")),
    };
    let z = FeatureVector::new(values).map_err(invalid)?;
    let sel = head.select(&z, &supported).map_err(invalid)?;
    let result = json!({
        "r_continuous": sel.r_continuous,
        "r": sel.r,
        "class_index": sel.class_index,
        "probabilities": sel.probabilities,
    });
    let primary = match &a.out {
        Some(out) => {
            write_json(out, &result)?;
            out.clone()
        }
        None => a.head.with_file_name(format!(
            "{}.select",
            a.head.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
        )),
    };
    let outputs: Vec<&std::path::Path> = a.out.iter().map(|p| p.as_path()).collect();
    manifest.finish(&outputs, &primary, result.clone())?;
    Ok(result)
}
