//! Gradient concentration, the AboveThreshold test and outlier filtering.

use rand::{Rng, RngCore};

use super::GradientVector;
use crate::error::{Error, Result};
use crate::rng::laplace;

/// Sensitivity of the concentration score: one user changes at most
/// `2N − 1` ordered pairs, each worth `1/N`.
pub const CONCENTRATION_SENSITIVITY: f64 = 2.0;

/// Row-major `N × N` matrix of L2 distances.
pub fn pairwise_distances(grads: &[GradientVector]) -> Vec<f64> {
    let n = grads.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dist = grads[i].distance(&grads[j]);
            d[i * n + j] = dist;
            d[j * n + i] = dist;
        }
    }
    d
}

/// `(1/N) · #{(i, i′) : ‖g_i − g_i′‖ ≤ τ}` over ordered pairs, diagonal
/// included.
pub fn concentration_score(grads: &[GradientVector], tau: f64) -> f64 {
    score_from_distances(&pairwise_distances(grads), grads.len(), tau)
}

pub(super) fn score_from_distances(d: &[f64], n: usize, tau: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    d.iter().filter(|&&x| x <= tau).count() as f64 / n as f64
}

/// Sparse-vector test with one noisy threshold per run and fresh noise on
/// every query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AboveThreshold {
    epsilon: f64,
    sensitivity: f64,
    noisy_threshold: f64,
}

impl AboveThreshold {
    /// Draws the threshold noise `Lap(2Δ/ε)`.
    pub fn new<R: Rng + ?Sized>(epsilon: f64, threshold: f64, sensitivity: f64, rng: &mut R) -> Result<Self> {
        if !(epsilon > 0.0) || !(sensitivity > 0.0) {
            return Err(Error::Domain(format!(
                "AboveThreshold needs epsilon > 0 and sensitivity > 0, got {epsilon}, {sensitivity}"
            )));
        }
        let noisy_threshold = threshold + laplace(rng, 2.0 * sensitivity / epsilon);
        Ok(Self { epsilon, sensitivity, noisy_threshold })
    }

    pub fn noisy_threshold(&self) -> f64 {
        self.noisy_threshold
    }

    /// ⊤ iff `score + Lap(4Δ/ε)` reaches the noisy threshold.
    pub fn test<R: Rng + ?Sized>(&self, score: f64, rng: &mut R) -> bool {
        score + laplace(rng, 4.0 * self.sensitivity / self.epsilon) >= self.noisy_threshold
    }
}

/// Single-query AboveThreshold: draws both the threshold and query noise.
pub fn above_threshold<R: Rng + ?Sized>(
    score: f64,
    epsilon: f64,
    threshold: f64,
    sensitivity: f64,
    rng: &mut R,
) -> Result<bool> {
    Ok(AboveThreshold::new(epsilon, threshold, sensitivity, rng)?.test(score, rng))
}

/// Keep probability for a user with `f` neighbours among `n`.
pub fn keep_probability(f: usize, n: usize) -> f64 {
    let (f, n) = (f as f64, n as f64);
    if f < n / 2.0 {
        0.0
    } else if f >= 2.0 * n / 3.0 {
        1.0
    } else {
        (f - n / 2.0) / (n / 6.0)
    }
}

/// Indices kept after dropping users with few neighbours within `2τ`.
pub fn filter_outliers(grads: &[GradientVector], tau: f64, rng: &mut dyn RngCore) -> Vec<usize> {
    filter_from_distances(&pairwise_distances(grads), grads.len(), tau, rng)
}

pub(super) fn filter_from_distances(d: &[f64], n: usize, tau: f64, rng: &mut dyn RngCore) -> Vec<usize> {
    let mut kept = Vec::new();
    for i in 0..n {
        let f = d[i * n..(i + 1) * n].iter().filter(|&&x| x <= 2.0 * tau).count();
        let p = keep_probability(f, n);
        // One draw per user regardless of branch keeps the stream aligned.
        let u: f64 = rng.random();
        if u < p {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn gv(v: &[f64]) -> GradientVector {
        GradientVector::from(v.to_vec())
    }

    #[test]
    fn identical_gradients_score_n() {
        let g = vec![gv(&[1.0, 2.0]); 7];
        assert_eq!(concentration_score(&g, 0.0), 7.0);
    }

    #[test]
    fn spread_gradients_score_one() {
        let g: Vec<_> = (0..5).map(|i| gv(&[10.0 * i as f64])).collect();
        assert_eq!(concentration_score(&g, 1.0), 1.0);
    }

    #[test]
    fn equilateral_triangle_counts_all_pairs() {
        let g = vec![gv(&[0.0, 0.0]), gv(&[1.0, 0.0]), gv(&[0.5, 3f64.sqrt() / 2.0])];
        let d = pairwise_distances(&g);
        let tau = d.iter().copied().fold(0.0, f64::max);
        assert!((tau - 1.0).abs() < 1e-15);
        assert_eq!(concentration_score(&g, tau), 3.0);
    }

    proptest! {
        #[test]
        fn score_in_range_and_monotone(
            pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 1..12),
            t1 in 0.0f64..10.0,
            t2 in 0.0f64..10.0,
        ) {
            let g: Vec<_> = pts.iter().map(|p| gv(p)).collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = concentration_score(&g, lo);
            let b = concentration_score(&g, hi);
            prop_assert!(a >= 1.0 && b <= g.len() as f64);
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn svt_outcomes_with_negligible_noise() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let n = 100.0;
        assert!(above_threshold(n, 1e3, 0.8 * n, CONCENTRATION_SENSITIVITY, &mut rng).unwrap());
        assert!(!above_threshold(1.0, 1e3, 0.8 * n, CONCENTRATION_SENSITIVITY, &mut rng).unwrap());
    }

    #[test]
    fn svt_is_seeded_and_draws_threshold_once() {
        let mut a = ChaCha20Rng::seed_from_u64(9);
        let mut b = ChaCha20Rng::seed_from_u64(9);
        let sa = AboveThreshold::new(1.0, 5.0, 2.0, &mut a).unwrap();
        let sb = AboveThreshold::new(1.0, 5.0, 2.0, &mut b).unwrap();
        assert_eq!(sa, sb);
        let outcomes_a: Vec<bool> = (0..20).map(|_| sa.test(5.0, &mut a)).collect();
        let outcomes_b: Vec<bool> = (0..20).map(|_| sb.test(5.0, &mut b)).collect();
        assert_eq!(outcomes_a, outcomes_b);
        assert!(outcomes_a.contains(&true) && outcomes_a.contains(&false));
        assert!(AboveThreshold::new(0.0, 1.0, 2.0, &mut a).is_err());
    }

    #[test]
    fn svt_noise_scales() {
        // Threshold noise Lap(2Δ/ε) has variance 2(2Δ/ε)²; query noise Lap(4Δ/ε).
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 40_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| AboveThreshold::new(2.0, 0.0, 2.0, &mut rng).unwrap().noisy_threshold())
            .collect();
        let var = draws.iter().map(|x| x * x).sum::<f64>() / n as f64;
        assert!((var / 8.0 - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn keep_probability_branches() {
        assert_eq!(keep_probability(1, 10), 0.0);
        assert_eq!(keep_probability(29, 60), 0.0);
        assert_eq!(keep_probability(40, 60), 1.0);
        assert_eq!(keep_probability(60, 60), 1.0);
        assert!((keep_probability(36, 60) - 0.6).abs() < 1e-15);
        assert_eq!(keep_probability(30, 60), 0.0);
    }

    #[test]
    fn filter_drops_isolated_and_keeps_clustered() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let same = vec![gv(&[1.0]); 6];
        assert_eq!(filter_outliers(&same, 0.0, &mut rng), (0..6).collect::<Vec<_>>());
        let mut g: Vec<_> = (0..9).map(|_| gv(&[0.0])).collect();
        g.push(gv(&[100.0]));
        let kept = filter_outliers(&g, 1.0, &mut rng);
        assert_eq!(kept, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn filter_middle_branch_keeps_at_rate() {
        // N = 60; 36 clustered users see f = 36, the 24 others are isolated.
        let mut g: Vec<_> = (0..36).map(|_| gv(&[0.0])).collect();
        g.extend((0..24).map(|i| gv(&[1000.0 * (i + 1) as f64])));
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let d = pairwise_distances(&g);
        let mut kept_cluster = 0usize;
        let trials = 2000;
        for _ in 0..trials {
            let kept = filter_from_distances(&d, 60, 1.0, &mut rng);
            assert!(kept.iter().all(|&i| i < 36));
            kept_cluster += kept.len();
        }
        let rate = kept_cluster as f64 / (36 * trials) as f64;
        assert!((rate - 0.6).abs() < 0.01, "rate {rate}");
    }
}
