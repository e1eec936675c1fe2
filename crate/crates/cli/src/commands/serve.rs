use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use tracing::info;

use resroute_gateway::service::serve;
use resroute_gateway::Gateway;

use crate::error::{invalid, runtime, CliError};
use crate::manifest::RunManifest;
use crate::Context;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Overrides `gateway.listen`.
    #[arg(long)]
    pub listen: Option<String>,
}

pub async fn run(ctx: &Context, a: Args) -> Result<Value, CliError> {
    let config_path = ctx.config_path.clone().ok_or_else(|| invalid("serve needs --config with a [gateway] section"))?;
    let mut cfg = ctx.config.gateway.clone().ok_or_else(|| invalid("configuration has no [gateway] section"))?;
    if let Some(l) = a.listen {
        cfg.listen = l;
    }
    let mut manifest = RunManifest::begin(ctx, "serve");
    manifest.input(&cfg.head_path);

    let gateway = Arc::new(Gateway::from_config(&cfg).await.map_err(invalid)?);
    let probes = gateway.spawn_probes(Duration::from_secs_f64(cfg.probe_interval_s));
    let listener = tokio::net::TcpListener::bind(&cfg.listen)
        .await
        .map_err(|e| runtime(format!("bind {}: {e}", cfg.listen)))?;
    let addr = listener.local_addr().map_err(runtime)?;
    info!(%addr, mode = %cfg.mode, "gateway listening");
    let manifest_at = config_path.with_extension("serve");
    // written now so a killed process still leaves a record, replaced on clean exit
    manifest.clone().finish(&[], &manifest_at, json!({"listen": addr.to_string(), "status": "running"}))?;
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
        info!("shutting down");
    };
    serve(gateway.clone(), listener, shutdown).await.map_err(runtime)?;
    probes.abort();

    let stats = serde_json::to_value(gateway.stats()).map_err(runtime)?;
    let summary = json!({"listen": addr.to_string(), "stats": stats});
    let manifest_path = manifest.finish(&[], &manifest_at, summary.clone())?;
    Ok(json!({"summary": summary, "manifest": manifest_path}))
}
