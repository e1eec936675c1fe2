use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{runtime, CliError};
use crate::settings::hex;
use crate::Context;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    /// Absent for directories and unreadable files.
    pub sha256: Option<String>,
}

impl FileDigest {
    pub fn of(path: &Path) -> Self {
        FileDigest { path: path.to_owned(), sha256: file_sha256(path).ok() }
    }
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

/// Provenance record written next to every command's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<PathBuf>,
    /// Digest of the effective configuration, defaults included.
    pub config_sha256: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub seed: u64,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub summary: Value,
}

impl RunManifest {
    pub fn begin(ctx: &Context, command: &str) -> Self {
        RunManifest {
            command: command.into(),
            argv: ctx.argv.clone(),
            config_path: ctx.config_path.clone(),
            config_sha256: ctx.config.digest(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: ctx.seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_at: now(),
            finished_at: String::new(),
            summary: Value::Null,
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(FileDigest::of(path));
    }

    /// Stamps the finish time, digests the outputs and writes the manifest
    /// next to `primary_output`. Returns the manifest path.
    pub fn finish(mut self, outputs: &[&Path], primary_output: &Path, summary: Value) -> Result<PathBuf, CliError> {
        self.outputs = outputs.iter().map(|p| FileDigest::of(p)).collect();
        self.summary = summary;
        self.finished_at = now();
        let path = manifest_path(primary_output);
        let text = serde_json::to_string_pretty(&self).map_err(runtime)?;
        std::fs::write(&path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// `dir/manifest.json` for a directory, `name.manifest.json` beside a file.
pub fn manifest_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        return output.join("manifest.json");
    }
    let name = output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "output".into());
    output.with_file_name(format!("{name}.manifest.json"))
}
