//! Synthetic datasets for desk-scale runs: planted sufficiency thresholds,
//! a matching simulator spec, shared source images, and class-separable
//! feature vectors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, Rgb, RgbImage};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageops::{self, ImageDims};
use crate::menu::ResolutionMenu;
use crate::store::{self, SampleRecord, StoredFeatures};
use crate::vlm::{SimulatedSample, SimulatedVlmSpec};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad threshold mix: {0}")]
    BadMix(String),
    #[error("n must be at least 1")]
    EmptyDataset,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] imageops::ImageError),
    #[error("store: {0}")]
    Store(#[from] store::StoreError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    /// Share of samples whose planted threshold is each menu entry.
    pub mix: BTreeMap<u32, f64>,
    pub seed: u64,
    pub feature_dim: usize,
    /// Distance between class centers in units of the per-dimension noise sigma.
    pub separation_sigmas: f64,
    pub native: ImageDims,
    /// Distinct source images shared round-robin by the samples.
    pub images: usize,
}

impl SynthConfig {
    pub fn new(n: usize, mix: BTreeMap<u32, f64>, seed: u64) -> Self {
        SynthConfig {
            n,
            mix,
            seed,
            feature_dim: 64,
            separation_sigmas: 6.0,
            native: ImageDims { width: 1024, height: 1024 },
            images: 8,
        }
    }
}

/// `{384: 0.7, 768: 0.2, 1024: 0.1}`.
pub fn default_mix() -> BTreeMap<u32, f64> {
    BTreeMap::from([(384, 0.7), (768, 0.2), (1024, 0.1)])
}

/// Parses `384:0.7,768:0.2,1024:0.1`.
pub fn parse_mix(text: &str) -> Result<BTreeMap<u32, f64>, SynthError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|part| {
            let (r, w) = part
                .split_once(':')
                .ok_or_else(|| SynthError::BadMix(format!("expected resolution:share, got `{part}`")))?;
            let r = r.trim().parse::<u32>().map_err(|e| SynthError::BadMix(format!("`{r}`: {e}")))?;
            let w = w.trim().parse::<f64>().map_err(|e| SynthError::BadMix(format!("`{w}`: {e}")))?;
            Ok((r, w))
        })
        .collect()
}

fn validate_mix(mix: &BTreeMap<u32, f64>, menu: &ResolutionMenu) -> Result<(), SynthError> {
    if mix.is_empty() {
        return Err(SynthError::BadMix("empty mix".into()));
    }
    for (r, w) in mix {
        if menu.index_of(*r).is_none() {
            return Err(SynthError::BadMix(format!("{r} is not a menu entry")));
        }
        if !(*w >= 0.0 && w.is_finite()) {
            return Err(SynthError::BadMix(format!("share {w} for {r} is negative or non-finite")));
        }
    }
    let total: f64 = mix.values().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(SynthError::BadMix(format!("shares sum to {total}, not 1")));
    }
    Ok(())
}

/// Paths written by [`simulate`] and the planted label counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub samples: PathBuf,
    pub spec: PathBuf,
    pub features: PathBuf,
    pub planted: BTreeMap<u32, usize>,
}

/// `{id, query, features}` lines served by stub feature endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLine {
    pub id: String,
    pub query: String,
    pub features: StoredFeatures,
}

const WORDS: [&str; 16] = [
    "total", "invoice", "march", "riehl", "carter", "north", "delta", "amount", "page", "figure", "sales", "report",
    "q3", "net", "item", "2019",
];

fn source_image(rng: &mut ChaCha8Rng, dims: ImageDims) -> DynamicImage {
    let (a, b, c) = (rng.gen_range(0..255u8), rng.gen_range(0..255u8), rng.gen_range(0..255u8));
    let stripe = rng.gen_range(6..40u32);
    DynamicImage::ImageRgb8(RgbImage::from_fn(dims.width, dims.height, |x, y| {
        let band = ((x / stripe) + (y / (stripe * 2))) % 3;
        let g = ((x * 255) / dims.width) as u8;
        match band {
            0 => Rgb([a, g, b]),
            1 => Rgb([g, c, a]),
            _ => Rgb([b, a, g]),
        }
    }))
}

/// Writes `samples.jsonl`, `spec.json`, `features.jsonl` and shared images
/// under `out_dir`. Deterministic for a fixed config.
pub fn simulate(cfg: &SynthConfig, menu: &ResolutionMenu, out_dir: &Path) -> Result<SynthOutput, SynthError> {
    if cfg.n == 0 {
        return Err(SynthError::EmptyDataset);
    }
    validate_mix(&cfg.mix, menu)?;
    std::fs::create_dir_all(out_dir.join("images"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_images = cfg.images.max(1);
    let mut image_paths = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let img = source_image(&mut rng, cfg.native);
        let path = out_dir.join("images").join(format!("img{i:03}.png"));
        std::fs::write(&path, imageops::encode_png(&img)?)?;
        image_paths.push(path.to_string_lossy().into_owned());
    }

    let entries: Vec<(u32, f64)> = cfg.mix.iter().map(|(r, w)| (*r, *w)).collect();
    let picker = WeightedIndex::new(entries.iter().map(|(_, w)| *w)).map_err(|e| SynthError::BadMix(e.to_string()))?;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    // centers on orthogonal axes, pairwise distance = separation * sigma
    let offset = cfg.separation_sigmas / std::f64::consts::SQRT_2;

    let mut spec = SimulatedVlmSpec::default();
    let mut records = Vec::with_capacity(cfg.n);
    let mut feature_lines = Vec::with_capacity(cfg.n);
    let mut planted = BTreeMap::new();
    let width = (cfg.n.max(10) as f64).log10().ceil() as usize + 1;
    for i in 0..cfg.n {
        let id = format!("s{i:0width$}");
        let threshold = entries[picker.sample(&mut rng)].0;
        let class = menu.index_of(threshold).expect("validated");
        *planted.entry(threshold).or_insert(0usize) += 1;

        let answer = (0..rng.gen_range(2..4))
            .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
            .collect::<Vec<_>>()
            .join(" ")
            + &format!(" {}", rng.gen_range(10..9999));
        let query = format!("[{id}] What does field {} say?", rng.gen_range(1..50));
        let z: Vec<f64> = (0..cfg.feature_dim)
            .map(|j| noise.sample(&mut rng) + if j == class % cfg.feature_dim { offset } else { 0.0 })
            .collect();
        let features = StoredFeatures::encode(&z);

        spec.samples.insert(
            id.clone(),
            SimulatedSample {
                sufficient_resolution: threshold,
                correct_answer: answer.clone(),
                sub_threshold_utility: 0.0,
                ramp: None,
                query: Some(query.clone()),
            },
        );
        let mut rec = SampleRecord::new(&id, &image_paths[i % n_images], &query, vec![answer]);
        rec.tag = Some("synthetic".into());
        rec.features = Some(features.clone());
        records.push(rec);
        feature_lines.push(FeatureLine { id, query, features });
    }

    let samples = out_dir.join("samples.jsonl");
    store::write_all(&samples, &records)?;
    let spec_path = out_dir.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_vec_pretty(&spec)?)?;
    let features = out_dir.join("features.jsonl");
    let mut text = String::new();
    for line in &feature_lines {
        text.push_str(&serde_json::to_string(line)?);
        text.push('\n');
    }
    std::fs::write(&features, text)?;
    Ok(SynthOutput { samples, spec: spec_path, features, planted })
}
