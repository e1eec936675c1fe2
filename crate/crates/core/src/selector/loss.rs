use super::policy::softmax;
use crate::scalar::Scalar;

/// Cross-entropy against the label-smoothed target
/// `q = (1 - eps) * onehot(label) + eps / K`.
///
/// Returns the loss and its gradient with respect to the logits, `p - q`.
pub fn smoothed_ce_loss<T: Scalar>(logits: &[T], label: usize, epsilon: T) -> (T, Vec<T>) {
    let k = logits.len();
    debug_assert!(label < k);
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    // log p_j = l_j - max - log(sum exp(l - max))
    let log_norm = logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
    let p = softmax(logits);
    let uniform = epsilon / T::of(k as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(k);
    for (j, (&l, &pj)) in logits.iter().zip(p.as_slice()).enumerate() {
        let q = if j == label { T::one() - epsilon + uniform } else { uniform };
        if q > T::zero() {
            loss = loss - q * (l - max - log_norm);
        }
        grad.push(pj - q);
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Independent loss: explicit log of explicit softmax, no shift.
    fn naive_loss(logits: &[f64], label: usize, eps: f64) -> f64 {
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let k = logits.len() as f64;
        logits
            .iter()
            .enumerate()
            .map(|(j, l)| {
                let q = if j == label { 1.0 - eps + eps / k } else { eps / k };
                -q * (l.exp() / z).ln()
            })
            .sum()
    }

    #[test]
    fn uniform_logits() {
        let (loss, grad) = smoothed_ce_loss(&[0.0, 0.0, 0.0], 0, 0.0);
        assert!((loss - 3f64.ln()).abs() < 1e-15);
        for (g, want) in grad.iter().zip([-2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]) {
            assert!((g - want).abs() < 1e-15);
        }
    }

    #[test]
    fn smoothed_target() {
        // grad = p - q with p uniform, so q = 1/3 - grad
        let (_, grad) = smoothed_ce_loss(&[0.0, 0.0, 0.0], 0, 0.05);
        let q: Vec<f64> = grad.iter().map(|g| 1.0 / 3.0 - g).collect();
        assert!((q[0] - 0.966_666_666_666_666_7).abs() < 1e-12);
        assert!((q[1] - 0.016_666_666_666_666_7).abs() < 1e-12);
        assert!((q[2] - q[1]).abs() < 1e-15);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let k = rng.gen_range(2..6);
            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let label = rng.gen_range(0..k);
            let eps = rng.gen_range(0.0..0.5);
            let (loss, _) = smoothed_ce_loss(&logits, label, eps);
            assert!((loss - naive_loss(&logits, label, eps)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..100 {
            let k = rng.gen_range(2..6);
            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let label = rng.gen_range(0..k);
            let eps = rng.gen_range(0.0..0.3);
            let (_, grad) = smoothed_ce_loss(&logits, label, eps);
            for j in 0..k {
                let mut up = logits.clone();
                let mut down = logits.clone();
                up[j] += h;
                down[j] -= h;
                let fd = (naive_loss(&up, label, eps) - naive_loss(&down, label, eps)) / (2.0 * h);
                let rel = (grad[j] - fd).abs() / grad[j].abs().max(fd.abs()).max(1e-8);
                assert!(rel < 1e-6, "j={j} analytic={} fd={fd} rel={rel}", grad[j]);
            }
        }
    }

    #[test]
    fn large_logits_stay_finite() {
        let (loss, grad) = smoothed_ce_loss(&[1000.0f32, -1000.0, 0.0], 1, 0.05);
        assert!(loss.is_finite() && grad.iter().all(|g| g.is_finite()));
    }
}
