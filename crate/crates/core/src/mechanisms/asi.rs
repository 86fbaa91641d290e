//! Filtered user-wise DP-SGD: every user participates, and the low-noise
//! update is released only when user gradients are concentrated.

use rand::RngCore;

use super::svt::{filter_from_distances, pairwise_distances, score_from_distances};
use super::{add_gaussian_noise, clip_in_place, sample_users, user_gradients, AboveThreshold, GradientVector};
use super::{StepOutcome, UserPool};
use crate::error::{Error, Result};
use crate::models::Model;

/// Per-coordinate noise std: `√(8τ² ln(e^ε T/δ)) · σ / N`.
pub fn asi_noise_std(tau: f64, epsilon: f64, delta: f64, steps: u64, n_users: usize, sigma: f64) -> f64 {
    let log_term = epsilon + (steps as f64).ln() - delta.ln();
    (8.0 * tau * tau * log_term).sqrt() * sigma / n_users as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsiStep {
    pub k: usize,
    pub clip: f64,
    pub tau: f64,
    pub noise_std: f64,
    pub eta: f64,
}

/// One step over all users of `pool`. Halts without touching the model when
/// the concentration test fails.
pub fn asi_step<M, P>(
    model: &mut M,
    pool: &P,
    step: &AsiStep,
    svt: &AboveThreshold,
    record_rng: &mut dyn RngCore,
    filter_rng: &mut dyn RngCore,
    noise_rng: &mut dyn RngCore,
) -> Result<StepOutcome>
where
    M: Model,
    P: UserPool<Example = M::Example>,
{
    if !(step.tau >= 0.0) || !(step.noise_std >= 0.0) {
        return Err(Error::Domain(format!("need tau >= 0 and noise std >= 0, got {}, {}", step.tau, step.noise_std)));
    }
    let n = pool.n_users();
    let users: Vec<usize> = (0..n).collect();
    let per_user = sample_users(pool, &users, step.k, record_rng)?;
    let mut grads = Vec::with_capacity(n);
    let mut clipped = 0usize;
    let mut loss = 0.0;
    for (l, mut g) in user_gradients(&*model, &per_user)? {
        if !l.is_finite() {
            return Err(Error::Numeric(format!("training loss is {l}")));
        }
        loss += l;
        if clip_in_place(&mut g, step.clip)? {
            clipped += 1;
        }
        grads.push(g);
    }
    let clipped_fraction = if n == 0 { 0.0 } else { clipped as f64 / n as f64 };
    let loss = (n > 0).then(|| loss / n as f64);
    let distances = pairwise_distances(&grads);
    let score = score_from_distances(&distances, n, step.tau);
    if !svt.test(score, filter_rng) {
        return Ok(StepOutcome {
            noised_gradient: None,
            clipped_fraction,
            batch_size_realized: n,
            halted: true,
            included_users: 0,
            loss,
        });
    }
    let kept = filter_from_distances(&distances, n, step.tau, filter_rng);
    let mut g = GradientVector::zeros(model.dim());
    for &i in &kept {
        g.add_assign(&grads[i]);
    }
    if !kept.is_empty() {
        g.div_assign(kept.len() as f64);
    }
    if step.noise_std > 0.0 {
        add_gaussian_noise(&mut g, step.noise_std, noise_rng);
    }
    model.apply_update(&g, step.eta);
    Ok(StepOutcome {
        noised_gradient: Some(g),
        clipped_fraction,
        batch_size_realized: n,
        halted: false,
        included_users: kept.len(),
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::CONCENTRATION_SENSITIVITY;
    use crate::models::{MeanEstimationProblem, MeanModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rngs() -> (ChaCha20Rng, ChaCha20Rng, ChaCha20Rng) {
        (ChaCha20Rng::seed_from_u64(1), ChaCha20Rng::seed_from_u64(2), ChaCha20Rng::seed_from_u64(3))
    }

    #[test]
    fn noise_std_formula() {
        let s = asi_noise_std(0.5, 3.0, 1e-5, 1000, 200, 4.0);
        let expect = (8.0 * 0.25 * (3f64.exp() * 1000.0 / 1e-5).ln()).sqrt() * 4.0 / 200.0;
        assert!((s - expect).abs() < 1e-15 * expect.max(1.0));
        assert_eq!(asi_noise_std(0.0, 3.0, 1e-5, 1000, 200, 4.0), 0.0);
    }

    #[test]
    fn identical_users_never_halt() {
        let pool = MeanEstimationProblem::new(vec![vec![vec![2.0, 0.0]]; 10]).unwrap();
        let mut m = MeanModel::zeros(2);
        let (mut r, mut f, mut n) = rngs();
        let svt = AboveThreshold::new(1e3, 8.0, CONCENTRATION_SENSITIVITY, &mut f).unwrap();
        let step = AsiStep { k: 1, clip: 100.0, tau: 0.1, noise_std: 0.0, eta: 0.25 };
        for _ in 0..5 {
            let out = asi_step(&mut m, &pool, &step, &svt, &mut r, &mut f, &mut n).unwrap();
            assert!(!out.halted);
            assert_eq!(out.included_users, 10);
        }
        // θ ← θ − 0.25·2(θ − x) halves the distance to x each step.
        assert!((m.params()[0] - 2.0 * (1.0 - 0.5f64.powi(5))).abs() < 1e-12);
    }

    #[test]
    fn common_gradient_plus_noise() {
        let pool = MeanEstimationProblem::new(vec![vec![vec![1.0; 3]]; 4]).unwrap();
        let mut m = MeanModel::zeros(3);
        let (mut r, mut f, mut n) = rngs();
        let svt = AboveThreshold::new(1e3, 3.2, CONCENTRATION_SENSITIVITY, &mut f).unwrap();
        let step = AsiStep { k: 1, clip: 100.0, tau: 0.0, noise_std: 0.3, eta: 1.0 };
        let mut expect_rng = n.clone();
        let out = asi_step(&mut m, &pool, &step, &svt, &mut r, &mut f, &mut n).unwrap();
        let mut expect = GradientVector::from(vec![-2.0; 3]);
        add_gaussian_noise(&mut expect, 0.3, &mut expect_rng);
        assert_eq!(out.noised_gradient.unwrap(), expect);
    }

    #[test]
    fn spread_users_halt_at_first_step() {
        let users = (0..10).map(|i| vec![vec![10.0 * i as f64]]).collect();
        let pool = MeanEstimationProblem::new(users).unwrap();
        let mut m = MeanModel::zeros(1);
        let before = m.clone();
        let (mut r, mut f, mut n) = rngs();
        let svt = AboveThreshold::new(1e3, 8.0, CONCENTRATION_SENSITIVITY, &mut f).unwrap();
        let step = AsiStep { k: 1, clip: 1e6, tau: 1.0, noise_std: 1.0, eta: 1.0 };
        let out = asi_step(&mut m, &pool, &step, &svt, &mut r, &mut f, &mut n).unwrap();
        assert!(out.halted);
        assert!(out.noised_gradient.is_none());
        assert_eq!(m, before);
    }

    #[test]
    fn zero_tau_halts_on_distinct_gradients() {
        let users = (0..6).map(|i| vec![vec![0.001 * i as f64]]).collect();
        let pool = MeanEstimationProblem::new(users).unwrap();
        let mut m = MeanModel::zeros(1);
        let (mut r, mut f, mut n) = rngs();
        let svt = AboveThreshold::new(1e3, 4.8, CONCENTRATION_SENSITIVITY, &mut f).unwrap();
        let step = AsiStep { k: 1, clip: 10.0, tau: 0.0, noise_std: 0.0, eta: 1.0 };
        assert!(asi_step(&mut m, &pool, &step, &svt, &mut r, &mut f, &mut n).unwrap().halted);
    }
}
