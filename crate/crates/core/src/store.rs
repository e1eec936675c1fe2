//! Line-delimited JSON persistence for samples, rollouts, labels and features.
//!
//! One self-contained record per line; images are stored by reference. A
//! crash can leave at most one partial final line, which readers skip with a
//! warning and writers trim before appending.
//!
//! Record keys: `id, image, query, gts, metric, tag?, rollout[{r, response,
//! utility}], label{r, k}, features{dim, b64}, status, error`. Unknown keys are
//! kept and written back unchanged.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::anls::MetricKind;
use crate::labeler::{RolloutRecord, SufficiencyLabel};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Schema { path: PathBuf, line: usize, message: String },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("serialize record `{0}`: {1}")]
    Serialize(String, serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_owned(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SampleStatus {
    #[default]
    Pending,
    Labeled,
    Failed,
}

/// Feature vector packed as little-endian `f32` bytes in base64.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredFeatures {
    pub dim: usize,
    pub b64: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureDecodeError {
    #[error("invalid base64: {0}")]
    Base64(String),
    #[error("declared dim {declared} but payload holds {actual} bytes")]
    Length { declared: usize, actual: usize },
    #[error("non-finite feature value at index {0}")]
    NonFinite(usize),
}

impl StoredFeatures {
    pub fn encode<T: Scalar>(values: &[T]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * 4);
        for v in values {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        StoredFeatures { dim: values.len(), b64: B64.encode(bytes) }
    }

    pub fn decode<T: Scalar>(&self) -> Result<Vec<T>, FeatureDecodeError> {
        let bytes = B64.decode(&self.b64).map_err(|e| FeatureDecodeError::Base64(e.to_string()))?;
        if bytes.len() != self.dim * 4 {
            return Err(FeatureDecodeError::Length { declared: self.dim, actual: bytes.len() });
        }
        bytes
            .chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                if v.is_finite() { Ok(T::of(v as f64)) } else { Err(FeatureDecodeError::NonFinite(i)) }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image: String,
    pub query: String,
    pub gts: Vec<String>,
    #[serde(default)]
    pub metric: MetricKind,
    /// Dataset or benchmark name, for per-tag averages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollout: Option<RolloutRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<SufficiencyLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<StoredFeatures>,
    #[serde(default)]
    pub status: SampleStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, image: impl Into<String>, query: impl Into<String>, gts: Vec<String>) -> Self {
        SampleRecord {
            id: id.into(),
            image: image.into(),
            query: query.into(),
            gts,
            metric: MetricKind::Anls,
            tag: None,
            rollout: None,
            label: None,
            features: None,
            status: SampleStatus::Pending,
            error: None,
            extra: Default::default(),
        }
    }

    /// Status-dependent invariants.
    pub fn check(&self) -> Result<(), String> {
        match self.status {
            SampleStatus::Labeled if self.rollout.is_none() || self.label.is_none() => {
                Err("labeled record without rollout or label".into())
            }
            SampleStatus::Failed if self.error.is_none() => Err("failed record without error".into()),
            _ => Ok(()),
        }
    }
}

/// Streaming reader over a store file; tracks ids seen so far.
pub struct StoreReader {
    path: PathBuf,
    reader: BufReader<File>,
    line_no: usize,
    seen: HashSet<String>,
    buf: String,
    truncated_tail: bool,
}

impl StoreReader {
    pub fn seen(&self) -> &HashSet<String> {
        &self.seen
    }

    /// Whether a partial final line was skipped.
    pub fn truncated_tail(&self) -> bool {
        self.truncated_tail
    }

    pub fn into_seen(self) -> HashSet<String> {
        self.seen
    }
}

impl Iterator for StoreReader {
    type Item = Result<SampleRecord, StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            let n = match self.reader.read_line(&mut self.buf) {
                Ok(n) => n,
                Err(e) => return Some(Err(StoreError::Io { path: self.path.clone(), source: e })),
            };
            if n == 0 {
                return None;
            }
            self.line_no += 1;
            let complete = self.buf.ends_with('\n');
            let line = self.buf.trim();
            if line.is_empty() {
                continue;
            }
            return match serde_json::from_str::<SampleRecord>(line) {
                Ok(rec) => {
                    if let Err(message) = rec.check() {
                        return Some(Err(StoreError::Schema { path: self.path.clone(), line: self.line_no, message }));
                    }
                    if !self.seen.insert(rec.id.clone()) {
                        return Some(Err(StoreError::DuplicateId(rec.id)));
                    }
                    Some(Ok(rec))
                }
                Err(_) if !complete => {
                    warn!(path = %self.path.display(), line = self.line_no, "skipping truncated final line");
                    self.truncated_tail = true;
                    None
                }
                Err(e) => Some(Err(StoreError::Schema {
                    path: self.path.clone(),
                    line: self.line_no,
                    message: e.to_string(),
                })),
            };
        }
    }
}

pub fn load(path: &Path) -> Result<StoreReader, StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(StoreReader {
        path: path.to_owned(),
        reader: BufReader::new(file),
        line_no: 0,
        seen: HashSet::new(),
        buf: String::new(),
        truncated_tail: false,
    })
}

pub fn load_all(path: &Path) -> Result<Vec<SampleRecord>, StoreError> {
    load(path)?.collect()
}

/// Single appender for a store file.
pub struct DatasetWriter {
    path: PathBuf,
    file: File,
    seen: HashSet<String>,
    appended: usize,
}

impl DatasetWriter {
    /// Opens (or creates) `path` for appending. Existing records are indexed;
    /// a partial final line is cut off so new records start on a fresh line.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let mut seen = HashSet::new();
        if path.exists() {
            let mut reader = load(path)?;
            for rec in reader.by_ref() {
                rec?;
            }
            seen = reader.into_seen();
            trim_partial_tail(path)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(DatasetWriter { path: path.to_owned(), file, seen, appended: 0 })
    }

    pub fn contains(&self, id: &str) -> bool {
        self.seen.contains(id)
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }

    /// Records written through this handle.
    pub fn appended(&self) -> usize {
        self.appended
    }

    pub fn append(&mut self, record: &SampleRecord) -> Result<(), StoreError> {
        if self.seen.contains(&record.id) {
            return Err(StoreError::DuplicateId(record.id.clone()));
        }
        let mut line =
            serde_json::to_vec(record).map_err(|e| StoreError::Serialize(record.id.clone(), e))?;
        line.push(b'\n');
        // one write per record keeps a crash to at most one partial line
        self.file.write_all(&line).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))?;
        self.seen.insert(record.id.clone());
        self.appended += 1;
        Ok(())
    }

    pub fn sync(&self) -> Result<(), StoreError> {
        self.file.sync_data().map_err(io_err(&self.path))
    }
}

fn trim_partial_tail(path: &Path) -> Result<(), StoreError> {
    let mut file = OpenOptions::new().read(true).write(true).open(path).map_err(io_err(path))?;
    let len = file.metadata().map_err(io_err(path))?.len();
    if len == 0 {
        return Ok(());
    }
    let mut last = [0u8; 1];
    file.seek(SeekFrom::Start(len - 1)).map_err(io_err(path))?;
    file.read_exact(&mut last).map_err(io_err(path))?;
    if last[0] == b'\n' {
        return Ok(());
    }
    // scan back to the previous newline
    let mut contents = Vec::new();
    file.seek(SeekFrom::Start(0)).map_err(io_err(path))?;
    file.read_to_end(&mut contents).map_err(io_err(path))?;
    let tail_start = contents.iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
    let tail = &contents[tail_start..];
    if serde_json::from_slice::<serde_json::Value>(tail).is_ok() {
        // complete record that only lacks its newline
        file.seek(SeekFrom::End(0)).map_err(io_err(path))?;
        file.write_all(b"\n").map_err(io_err(path))?;
    } else {
        warn!(path = %path.display(), bytes = tail.len(), "dropping partial final line");
        file.set_len(tail_start as u64).map_err(io_err(path))?;
    }
    Ok(())
}

/// Writes `records` to a fresh file, replacing any existing content.
pub fn write_all(path: &Path, records: &[SampleRecord]) -> Result<(), StoreError> {
    if path.exists() {
        std::fs::remove_file(path).map_err(io_err(path))?;
    }
    let mut w = DatasetWriter::open(path)?;
    for r in records {
        w.append(r)?;
    }
    Ok(())
}
