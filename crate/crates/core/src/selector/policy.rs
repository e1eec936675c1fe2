use serde::Serialize;

use super::{ProbabilityVector, SelectorError};
use crate::menu::ResolutionMenu;
use crate::scalar::Scalar;

/// Max-shifted softmax; stable for large logit magnitudes.
pub fn softmax<T: Scalar>(logits: &[T]) -> ProbabilityVector<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    ProbabilityVector::new_unchecked(exps.into_iter().map(|e| e / total).collect())
}

/// Probability-weighted mean of the menu resolutions, clamped to
/// `[r_1, r_K]` against rounding.
pub fn expected_resolution<T: Scalar>(p: &ProbabilityVector<T>, menu: &ResolutionMenu) -> Result<f64, SelectorError> {
    if p.len() != menu.len() {
        return Err(SelectorError::ClassCountMismatch { got: p.len(), expected: menu.len() });
    }
    let r: f64 = p.as_slice().iter().zip(menu.entries()).map(|(pk, rk)| pk.as_f64() * *rk as f64).sum();
    Ok(r.clamp(menu.min() as f64, menu.max() as f64))
}

/// Smallest supported size at or above `r`; the largest size when `r`
/// exceeds all of them.
pub fn round_to_supported(r: f64, supported: &[u32]) -> Result<u32, SelectorError> {
    let max = *supported.last().ok_or(SelectorError::EmptySupportedSet)?;
    Ok(supported.iter().copied().find(|s| *s as f64 >= r).unwrap_or(max))
}

/// Outcome of one selection.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    /// Expected resolution before rounding.
    pub r_continuous: f64,
    /// Resolution to send.
    pub r: u32,
    pub class_index: usize,
    pub probabilities: Vec<f64>,
}
