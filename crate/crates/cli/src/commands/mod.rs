use std::path::Path;

use resroute_core::store::{self, SampleRecord};
use resroute_core::{FeatureVector, Head};

use crate::error::{invalid, runtime, CliError};

pub mod eval;
pub mod label;
pub mod report;
pub mod select;
pub mod serve;
pub mod simulate;
pub mod train;

pub(crate) fn load_samples(path: &Path) -> Result<Vec<SampleRecord>, CliError> {
    store::load_all(path).map_err(invalid)
}

pub(crate) fn load_head(path: &Path) -> Result<Head, CliError> {
    Head::load(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Stored features of a record, if any.
pub(crate) fn stored_features(rec: &SampleRecord) -> Result<Option<FeatureVector<f64>>, CliError> {
    let Some(f) = &rec.features else { return Ok(None) };
    let values = f.decode::<f64>().map_err(|e| invalid(format!("sample `{}` features: {e}", rec.id)))?;
    FeatureVector::new(values).map(Some).map_err(|e| invalid(format!("sample `{}` features: {e}", rec.id)))
}

pub(crate) fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    std::fs::write(path, text + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))
}

pub(crate) fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
        }
        _ => Ok(()),
    }
}
