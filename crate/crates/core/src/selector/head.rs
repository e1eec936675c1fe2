use std::path::Path;

use serde::{Deserialize, Serialize};

use super::policy::{expected_resolution, round_to_supported, softmax, Selection};
use super::train::TrainConfig;
use super::{argmax_low, FeatureVector, ProbabilityVector, SelectorError};
use crate::labeler::SufficiencyLabel;
use crate::menu::ResolutionMenu;
use crate::scalar::Scalar;

pub const HEAD_FORMAT: &str = "resroute-head";
const HEAD_VERSION: u32 = 1;

/// Optional ReLU layer between the features and the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer<T: Scalar> {
    /// `width x dim`, row-major.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> HiddenLayer<T> {
    pub fn width(&self) -> usize {
        self.bias.len()
    }

    pub(crate) fn forward(&self, z: &[T]) -> Vec<T> {
        let dim = z.len();
        self.bias
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let row = &self.weights[i * dim..(i + 1) * dim];
                let a = row.iter().zip(z).fold(*b, |acc, (w, x)| acc + *w * *x);
                a.max(T::zero())
            })
            .collect()
    }
}

/// K-way classifier over `dim`-dimensional features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T: Scalar> {
    dim: usize,
    /// `K x input_width`, row-major; input width is `dim` or the hidden width.
    pub(crate) weights: Vec<T>,
    pub(crate) bias: Vec<T>,
    pub(crate) hidden: Option<HiddenLayer<T>>,
    menu: ResolutionMenu,
    /// Training provenance, carried into the head file.
    pub train_config: Option<TrainConfig>,
    pub data_checksum: Option<String>,
}

impl<T: Scalar> ClassifierHead<T> {
    /// All-zero linear head.
    pub fn zeros(dim: usize, menu: ResolutionMenu) -> Self {
        let k = menu.len();
        ClassifierHead {
            dim,
            weights: vec![T::zero(); k * dim],
            bias: vec![T::zero(); k],
            hidden: None,
            menu,
            train_config: None,
            data_checksum: None,
        }
    }

    /// Linear head from explicit parameters (`weights` is `K x dim`, row-major).
    pub fn linear(weights: Vec<T>, bias: Vec<T>, menu: ResolutionMenu) -> Result<Self, SelectorError> {
        let k = menu.len();
        if bias.len() != k || k == 0 || !weights.len().is_multiple_of(k) {
            return Err(SelectorError::BadHead(format!(
                "expected {k} bias terms and a weight count divisible by {k}, got {} and {}",
                bias.len(),
                weights.len()
            )));
        }
        let head = ClassifierHead {
            dim: weights.len() / k,
            weights,
            bias,
            hidden: None,
            menu,
            train_config: None,
            data_checksum: None,
        };
        head.check_finite()?;
        Ok(head)
    }

    pub(crate) fn with_hidden(mut self, hidden: HiddenLayer<T>) -> Self {
        let k = self.menu.len();
        self.weights = vec![T::zero(); k * hidden.width()];
        self.hidden = Some(hidden);
        self
    }

    fn check_finite(&self) -> Result<(), SelectorError> {
        let hidden = self.hidden.iter().flat_map(|h| h.weights.iter().chain(&h.bias));
        if self.weights.iter().chain(&self.bias).chain(hidden).any(|v| !v.is_finite()) {
            return Err(SelectorError::BadHead("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.menu.len()
    }

    pub fn menu(&self) -> &ResolutionMenu {
        &self.menu
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn hidden(&self) -> Option<&HiddenLayer<T>> {
        self.hidden.as_ref()
    }

    pub(crate) fn input_width(&self) -> usize {
        self.hidden.as_ref().map_or(self.dim, HiddenLayer::width)
    }

    pub(crate) fn output_logits(&self, input: &[T]) -> Vec<T> {
        let width = input.len();
        self.bias
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let row = &self.weights[k * width..(k + 1) * width];
                row.iter().zip(input).fold(*b, |acc, (w, x)| acc + *w * *x)
            })
            .collect()
    }

    fn check_dim(&self, z: &[T]) -> Result<(), SelectorError> {
        if z.len() != self.dim {
            return Err(SelectorError::DimensionMismatch { got: z.len(), expected: self.dim });
        }
        Ok(())
    }

    /// `W z + b`, through the hidden layer when present.
    pub fn logits(&self, z: &FeatureVector<T>) -> Result<Vec<T>, SelectorError> {
        self.logits_raw(z.as_slice())
    }

    pub(crate) fn logits_raw(&self, z: &[T]) -> Result<Vec<T>, SelectorError> {
        self.check_dim(z)?;
        Ok(match &self.hidden {
            Some(h) => self.output_logits(&h.forward(z)),
            None => self.output_logits(z),
        })
    }

    pub fn probabilities(&self, z: &FeatureVector<T>) -> Result<ProbabilityVector<T>, SelectorError> {
        Ok(softmax(&self.logits(z)?))
    }

    /// Argmax class; ties resolve to the lower resolution.
    pub fn select_discrete(&self, z: &FeatureVector<T>) -> Result<SufficiencyLabel, SelectorError> {
        let k = argmax_low(&self.logits(z)?);
        Ok(SufficiencyLabel::from_index(&self.menu, k))
    }

    /// Expected resolution rounded up to the next supported size.
    pub fn select_continuous(&self, z: &FeatureVector<T>, supported: &[u32]) -> Result<u32, SelectorError> {
        Ok(self.select(z, supported)?.r)
    }

    /// Full continuous selection, with the intermediate quantities.
    pub fn select(&self, z: &FeatureVector<T>, supported: &[u32]) -> Result<Selection, SelectorError> {
        let logits = self.logits(z)?;
        let p = softmax(&logits);
        let r_continuous = expected_resolution(&p, &self.menu)?;
        let r = round_to_supported(r_continuous, supported)?;
        Ok(Selection {
            r_continuous,
            r,
            class_index: argmax_low(&logits),
            probabilities: p.as_slice().iter().map(|x| x.as_f64()).collect(),
        })
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ClassifierHead<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        ClassifierHead {
            dim: self.dim,
            weights: conv(&self.weights),
            bias: conv(&self.bias),
            hidden: self.hidden.as_ref().map(|h| HiddenLayer { weights: conv(&h.weights), bias: conv(&h.bias) }),
            menu: self.menu.clone(),
            train_config: self.train_config.clone(),
            data_checksum: self.data_checksum.clone(),
        }
    }

    pub fn to_file(&self) -> HeadFile {
        let conv = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
        HeadFile {
            format: HEAD_FORMAT.into(),
            version: HEAD_VERSION,
            dim: self.dim,
            classes: self.menu.len(),
            menu: self.menu.clone(),
            weights: conv(&self.weights),
            bias: conv(&self.bias),
            hidden: self.hidden.as_ref().map(|h| HiddenFile {
                width: h.width(),
                weights: conv(&h.weights),
                bias: conv(&h.bias),
            }),
            train_config: self.train_config.clone(),
            data_checksum: self.data_checksum.clone(),
        }
    }

    pub fn from_file(file: HeadFile) -> Result<Self, SelectorError> {
        let bad = |m: String| SelectorError::BadHead(m);
        if file.format != HEAD_FORMAT {
            return Err(bad(format!("unknown format `{}`", file.format)));
        }
        if file.version != HEAD_VERSION {
            return Err(bad(format!("unsupported version {}", file.version)));
        }
        let k = file.menu.len();
        if file.classes != k {
            return Err(bad(format!("classes {} but menu has {k} entries", file.classes)));
        }
        let width = file.hidden.as_ref().map_or(file.dim, |h| h.width);
        if file.weights.len() != k * width || file.bias.len() != k {
            return Err(bad(format!("expected {}x{} weights and {k} bias terms", k, width)));
        }
        if let Some(h) = &file.hidden {
            if h.weights.len() != h.width * file.dim || h.bias.len() != h.width {
                return Err(bad(format!("hidden layer expects {}x{} weights", h.width, file.dim)));
            }
        }
        let conv = |v: &[f64]| v.iter().map(|x| T::of(*x)).collect::<Vec<T>>();
        let head = ClassifierHead {
            dim: file.dim,
            weights: conv(&file.weights),
            bias: conv(&file.bias),
            hidden: file.hidden.as_ref().map(|h| HiddenLayer { weights: conv(&h.weights), bias: conv(&h.bias) }),
            menu: file.menu,
            train_config: file.train_config,
            data_checksum: file.data_checksum,
        };
        head.check_finite()?;
        Ok(head)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_vec_pretty(&self.to_file()).map_err(std::io::Error::other)?;
        std::fs::write(path, json)
    }

    pub fn load(path: &Path) -> Result<Self, SelectorError> {
        let bytes = std::fs::read(path).map_err(|e| SelectorError::BadHead(format!("{}: {e}", path.display())))?;
        let file: HeadFile =
            serde_json::from_slice(&bytes).map_err(|e| SelectorError::BadHead(format!("{}: {e}", path.display())))?;
        Self::from_file(file)
    }
}

/// On-disk head: dimensions, menu, row-major `f64` parameters and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadFile {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub classes: usize,
    pub menu: ResolutionMenu,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<HiddenFile>,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    #[serde(default)]
    pub data_checksum: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenFile {
    pub width: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}
