use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::head::{ClassifierHead, HiddenLayer};
use super::loss::smoothed_ce_loss;
use super::policy::softmax;
use super::{argmax_low, FeatureVector, SelectorError};
use crate::labeler::SufficiencyLabel;
use crate::menu::ResolutionMenu;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Width of an optional ReLU hidden layer; `None` trains a linear head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_units: Option<usize>,
    /// Per-class loss weights, indexed like the menu.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    6
}
fn default_smoothing() -> f64 {
    0.05
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            label_smoothing: default_smoothing(),
            seed: 0,
            optimizer: OptimizerKind::default(),
            hidden_units: None,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self, classes: usize) -> Result<(), SelectorError> {
        let bad = |m: String| Err(SelectorError::BadConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} not in [0, 1)", self.label_smoothing));
        }
        if self.hidden_units == Some(0) {
            return bad("hidden_units must be positive".into());
        }
        if let Some(w) = &self.class_weights {
            if w.len() != classes || w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                return bad(format!("class_weights needs {classes} non-negative entries"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean (weighted) loss over each epoch's updates.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub samples: usize,
    pub data_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub accuracy: f64,
    /// Mean of the largest class probability.
    pub mean_confidence: f64,
    pub samples: usize,
}

/// SHA-256 over dimensions, features and labels.
fn checksum<T: Scalar>(data: &[(FeatureVector<T>, SufficiencyLabel)], dim: usize, classes: usize) -> String {
    let mut h = Sha256::new();
    h.update((dim as u64).to_le_bytes());
    h.update((classes as u64).to_le_bytes());
    for (z, label) in data {
        for v in z.as_slice() {
            h.update(v.as_f64().to_le_bytes());
        }
        h.update((label.class_index as u64).to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Flat parameter view so one optimizer loop covers every layer.
struct Params<'a, T: Scalar> {
    slices: Vec<&'a mut Vec<T>>,
}

struct OptimizerState<T: Scalar> {
    kind: OptimizerKind,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: i32,
}

impl<T: Scalar> OptimizerState<T> {
    fn new(kind: OptimizerKind, shapes: &[usize]) -> Self {
        OptimizerState {
            kind,
            first: shapes.iter().map(|n| vec![T::zero(); *n]).collect(),
            second: shapes.iter().map(|n| vec![T::zero(); *n]).collect(),
            step: 0,
        }
    }

    fn apply(&mut self, params: Params<'_, T>, grads: &[Vec<T>], lr: T) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
                let c1 = T::one() - b1.powi(self.step);
                let c2 = T::one() - b2.powi(self.step);
                for (i, p) in params.slices.into_iter().enumerate() {
                    for (j, w) in p.iter_mut().enumerate() {
                        let g = grads[i][j];
                        let m = b1 * self.first[i][j] + (T::one() - b1) * g;
                        let v = b2 * self.second[i][j] + (T::one() - b2) * g * g;
                        self.first[i][j] = m;
                        self.second[i][j] = v;
                        *w = *w - lr * (m / c1) / ((v / c2).sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd { momentum } => {
                let mu = T::of(momentum);
                for (i, p) in params.slices.into_iter().enumerate() {
                    for (j, w) in p.iter_mut().enumerate() {
                        let v = mu * self.first[i][j] + grads[i][j];
                        self.first[i][j] = v;
                        *w = *w - lr * v;
                    }
                }
            }
        }
    }
}

fn validate_data<T: Scalar>(
    data: &[(FeatureVector<T>, SufficiencyLabel)],
    menu: &ResolutionMenu,
) -> Result<usize, SelectorError> {
    let dim = data.first().ok_or(SelectorError::EmptyDataset)?.0.dim();
    for (i, (z, label)) in data.iter().enumerate() {
        if z.dim() != dim {
            return Err(SelectorError::InconsistentDimensions { index: i, got: z.dim(), expected: dim });
        }
        if menu.entries().get(label.class_index) != Some(&label.resolution) {
            return Err(SelectorError::LabelOutsideMenu {
                resolution: label.resolution,
                class_index: label.class_index,
            });
        }
    }
    Ok(dim)
}

/// Mini-batch training of a selector head with label-smoothed cross-entropy.
///
/// Deterministic for a fixed `cfg.seed`: the shuffle order and any hidden
/// layer initialization come from a seeded ChaCha stream, and gradients are
/// summed in sample order.
pub fn train_head<T: Scalar>(
    data: &[(FeatureVector<T>, SufficiencyLabel)],
    menu: &ResolutionMenu,
    cfg: &TrainConfig,
) -> Result<(ClassifierHead<T>, TrainReport), SelectorError> {
    let dim = validate_data(data, menu)?;
    let classes = menu.len();
    cfg.validate(classes)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = ClassifierHead::zeros(dim, menu.clone());
    if let Some(width) = cfg.hidden_units {
        let bound = (6.0 / (dim + width) as f64).sqrt();
        let weights = (0..width * dim).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
        head = head.with_hidden(HiddenLayer { weights, bias: vec![T::zero(); width] });
        // break output-layer symmetry as well
        let out_bound = (6.0 / (width + classes) as f64).sqrt();
        for w in head.weights.iter_mut() {
            *w = T::of(rng.gen_range(-out_bound..out_bound));
        }
    }

    let width = head.input_width();
    let shapes: Vec<usize> = match &head.hidden {
        Some(h) => vec![head.weights.len(), head.bias.len(), h.weights.len(), h.bias.len()],
        None => vec![head.weights.len(), head.bias.len()],
    };
    let mut opt = OptimizerState::<T>::new(cfg.optimizer, &shapes);
    let eps = T::of(cfg.label_smoothing);
    let lr = T::of(cfg.learning_rate);
    let class_weight = |k: usize| cfg.class_weights.as_ref().map_or(T::one(), |w| T::of(w[k]));

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Vec<T>> = shapes.iter().map(|n| vec![T::zero(); *n]).collect();
            let scale = T::one() / T::of(batch.len() as f64);
            for &i in batch {
                let (z, label) = &data[i];
                let z = z.as_slice();
                let hidden_out = head.hidden.as_ref().map(|h| h.forward(z));
                let input = hidden_out.as_deref().unwrap_or(z);
                let logits = head.output_logits(input);
                let (loss, dlogits) = smoothed_ce_loss(&logits, label.class_index, eps);
                let cw = class_weight(label.class_index);
                epoch_loss += (loss * cw).as_f64() / batch.len() as f64;
                for (k, g) in dlogits.iter().enumerate() {
                    let g = *g * cw * scale;
                    for (j, x) in input.iter().enumerate() {
                        grads[0][k * width + j] = grads[0][k * width + j] + g * *x;
                    }
                    grads[1][k] = grads[1][k] + g;
                }
                if let (Some(h), Some(act)) = (&head.hidden, &hidden_out) {
                    for u in 0..h.width() {
                        if act[u] <= T::zero() {
                            continue;
                        }
                        let back: T = (0..classes).map(|k| dlogits[k] * head.weights[k * width + u]).sum();
                        let back = back * cw * scale;
                        for (j, x) in z.iter().enumerate() {
                            grads[2][u * dim + j] = grads[2][u * dim + j] + back * *x;
                        }
                        grads[3][u] = grads[3][u] + back;
                    }
                }
            }
            let mut slices: Vec<&mut Vec<T>> = vec![&mut head.weights, &mut head.bias];
            if let Some(h) = head.hidden.as_mut() {
                slices.push(&mut h.weights);
                slices.push(&mut h.bias);
            }
            opt.apply(Params { slices }, &grads, lr);
        }
        let batches = data.len().div_ceil(cfg.batch_size);
        epoch_losses.push(epoch_loss / batches as f64);
    }

    let train = evaluate(&head, data)?;
    let data_checksum = checksum(data, dim, classes);
    head.train_config = Some(cfg.clone());
    head.data_checksum = Some(data_checksum.clone());
    Ok((head, TrainReport { epoch_losses, train_accuracy: train.accuracy, samples: data.len(), data_checksum }))
}

/// Argmax accuracy and mean top-class confidence.
pub fn evaluate<T: Scalar>(
    head: &ClassifierHead<T>,
    data: &[(FeatureVector<T>, SufficiencyLabel)],
) -> Result<EvalStats, SelectorError> {
    if data.is_empty() {
        return Err(SelectorError::EmptyDataset);
    }
    let mut correct = 0usize;
    let mut confidence = 0.0;
    for (z, label) in data {
        let logits = head.logits(z)?;
        if argmax_low(&logits) == label.class_index {
            correct += 1;
        }
        confidence += softmax(&logits).max().as_f64();
    }
    let n = data.len() as f64;
    Ok(EvalStats { accuracy: correct as f64 / n, mean_confidence: confidence / n, samples: data.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn clusters(n_per: usize, dim: usize, sep: f64, seed: u64) -> Vec<(FeatureVector<f64>, SufficiencyLabel)> {
        let menu = ResolutionMenu::default_menu();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut out = Vec::new();
        for k in 0..3 {
            for _ in 0..n_per {
                let z: Vec<f64> = (0..dim)
                    .map(|j| noise.sample(&mut rng) + if j == k { sep } else { 0.0 })
                    .collect();
                out.push((FeatureVector::new(z).unwrap(), SufficiencyLabel::from_index(&menu, k)));
            }
        }
        out
    }

    #[test]
    fn separable_clusters_train_well() {
        let menu = ResolutionMenu::default_menu();
        let train = clusters(200, 16, 6.0, 1);
        let held = clusters(100, 16, 6.0, 2);
        let (head, report) = train_head(&train, &menu, &TrainConfig::default()).unwrap();
        assert_eq!(report.epoch_losses.len(), 6);
        assert!(report.epoch_losses.last() < report.epoch_losses.first());
        assert!(report.train_accuracy >= 0.99, "{report:?}");
        assert!(evaluate(&head, &held).unwrap().accuracy >= 0.95);
    }

    #[test]
    fn smoothing_lowers_confidence() {
        let menu = ResolutionMenu::default_menu();
        let train = clusters(200, 16, 6.0, 3);
        let held = clusters(100, 16, 6.0, 4);
        let cfg = TrainConfig { epochs: 40, learning_rate: 0.05, ..Default::default() };
        let sharp = train_head(&train, &menu, &TrainConfig { label_smoothing: 0.0, ..cfg.clone() }).unwrap().0;
        let smooth = train_head(&train, &menu, &TrainConfig { label_smoothing: 0.05, ..cfg }).unwrap().0;
        let max_conf = |h: &ClassifierHead<f64>| {
            held.iter().map(|(z, _)| h.probabilities(z).unwrap().max()).fold(0.0, f64::max)
        };
        assert!(max_conf(&smooth) < max_conf(&sharp), "{} vs {}", max_conf(&smooth), max_conf(&sharp));
        assert!(
            evaluate(&smooth, &held).unwrap().mean_confidence < evaluate(&sharp, &held).unwrap().mean_confidence
        );
    }

    #[test]
    fn zero_learning_rate_keeps_head() {
        let menu = ResolutionMenu::default_menu();
        let data = clusters(1, 4, 6.0, 5)[..1].to_vec();
        let cfg = TrainConfig { epochs: 1, learning_rate: 0.0, ..Default::default() };
        let (head, _) = train_head(&data, &menu, &cfg).unwrap();
        assert!(head.weights().iter().chain(head.bias()).all(|w| *w == 0.0));
    }

    #[test]
    fn deterministic_for_seed() {
        let menu = ResolutionMenu::default_menu();
        let data = clusters(50, 8, 4.0, 6);
        let cfg = TrainConfig { seed: 42, hidden_units: Some(8), ..Default::default() };
        let a = train_head(&data, &menu, &cfg).unwrap();
        let b = train_head(&data, &menu, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = train_head(&data, &menu, &TrainConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.0.weights(), c.0.weights());
    }

    #[test]
    fn hidden_layer_and_sgd_learn() {
        let menu = ResolutionMenu::default_menu();
        let data = clusters(100, 8, 6.0, 7);
        let cfg = TrainConfig { hidden_units: Some(16), epochs: 20, learning_rate: 0.01, ..Default::default() };
        let (_, report) = train_head(&data, &menu, &cfg).unwrap();
        assert!(report.train_accuracy >= 0.95, "{report:?}");
        let sgd = TrainConfig {
            optimizer: OptimizerKind::Sgd { momentum: 0.9 },
            learning_rate: 0.05,
            ..Default::default()
        };
        let (_, report) = train_head(&data, &menu, &sgd).unwrap();
        assert!(report.train_accuracy >= 0.95, "{report:?}");
    }

    #[test]
    fn class_weights_shift_decisions() {
        let menu = ResolutionMenu::default_menu();
        // overlapping clusters so the weighting matters
        let data = clusters(100, 4, 1.0, 8);
        let base = TrainConfig { epochs: 30, learning_rate: 0.05, ..Default::default() };
        let weighted = TrainConfig { class_weights: Some(vec![1.0, 1.0, 10.0]), ..base.clone() };
        let count_top = |cfg: &TrainConfig| {
            let (h, _) = train_head(&data, &menu, cfg).unwrap();
            data.iter().filter(|(z, _)| h.select_discrete(z).unwrap().class_index == 2).count()
        };
        assert!(count_top(&weighted) > count_top(&base));
    }

    #[test]
    fn rejects_bad_input() {
        let menu = ResolutionMenu::default_menu();
        assert_eq!(train_head::<f64>(&[], &menu, &TrainConfig::default()).unwrap_err(), SelectorError::EmptyDataset);
        let mut data = clusters(2, 4, 1.0, 9);
        data[1].0 = FeatureVector::new(vec![0.0; 5]).unwrap();
        assert!(matches!(
            train_head(&data, &menu, &TrainConfig::default()),
            Err(SelectorError::InconsistentDimensions { index: 1, got: 5, expected: 4 })
        ));
        let mut data = clusters(2, 4, 1.0, 9);
        data[0].1 = SufficiencyLabel { resolution: 500, class_index: 0 };
        assert!(matches!(train_head(&data, &menu, &TrainConfig::default()), Err(SelectorError::LabelOutsideMenu { .. })));
        let data = clusters(2, 4, 1.0, 9);
        let cfg = TrainConfig { label_smoothing: 1.0, ..Default::default() };
        assert!(matches!(train_head(&data, &menu, &cfg), Err(SelectorError::BadConfig(_))));
    }

    #[test]
    fn trains_in_f32() {
        let menu = ResolutionMenu::default_menu();
        let data: Vec<(FeatureVector<f32>, SufficiencyLabel)> = clusters(100, 8, 6.0, 10)
            .into_iter()
            .map(|(z, l)| (FeatureVector::new(z.as_slice().iter().map(|x| *x as f32).collect()).unwrap(), l))
            .collect();
        let (_, report) = train_head(&data, &menu, &TrainConfig::default()).unwrap();
        assert!(report.train_accuracy >= 0.99);
    }
}
