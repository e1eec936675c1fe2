//! The resolution selector: a K-way classifier head over joint image-query
//! features, its label-smoothed trainer, and the discrete and continuous
//! inference policies.

mod head;
mod loss;
mod policy;
mod train;

pub use head::{ClassifierHead, HeadFile, HiddenLayer, HEAD_FORMAT};
pub use loss::smoothed_ce_loss;
pub use policy::{expected_resolution, round_to_supported, softmax, Selection};
pub use train::{evaluate, train_head, EvalStats, OptimizerKind, TrainConfig, TrainReport};

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectorError {
    #[error("feature dimension {got} does not match head dimension {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("probabilities must be non-negative and sum to 1 (sum {0})")]
    NotSimplex(f64),
    #[error("probability vector has {got} entries, menu has {expected}")]
    ClassCountMismatch { got: usize, expected: usize },
    #[error("supported size list is empty")]
    EmptySupportedSet,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("inconsistent feature dimensions: sample {index} has {got}, expected {expected}")]
    InconsistentDimensions { index: usize, got: usize, expected: usize },
    #[error("label {resolution} (class {class_index}) is not in the menu")]
    LabelOutsideMenu { resolution: u32, class_index: usize },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("invalid head file: {0}")]
    BadHead(String),
}

/// Finite feature vector from the feature adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<T: Scalar>(Vec<T>);

impl<T: Scalar> FeatureVector<T> {
    pub fn new(values: Vec<T>) -> Result<Self, SelectorError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(SelectorError::NonFinite(i));
        }
        Ok(FeatureVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

/// Class probabilities: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector<T: Scalar>(Vec<T>);

impl<T: Scalar> ProbabilityVector<T> {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn new(p: Vec<T>) -> Result<Self, SelectorError> {
        let sum: f64 = p.iter().map(|x| x.as_f64()).sum();
        let tol = if std::mem::size_of::<T>() < 8 { 1e-5 } else { Self::TOLERANCE };
        if p.iter().any(|x| !(x.as_f64() >= 0.0)) || (sum - 1.0).abs() > tol {
            return Err(SelectorError::NotSimplex(sum));
        }
        Ok(ProbabilityVector(p))
    }

    pub(crate) fn new_unchecked(p: Vec<T>) -> Self {
        ProbabilityVector(p)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax_low(&self.0)
    }

    pub fn max(&self) -> T {
        self.0.iter().copied().fold(T::zero(), T::max)
    }
}

/// First index of the maximum.
pub(crate) fn argmax_low<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
