use serde::{Deserialize, Serialize};

use super::pld::{
    compose_with, compose_within, gaussian_pld, mog_pld, Discretization, PrivacyLossDistribution, Rounding,
};
use super::{naive_group_target, GroupConversion};
use crate::error::{Error, Result};

/// Relative width of the σ bracket at which bisection stops.
pub const BISECTION_TOLERANCE: f64 = 1e-3;
pub const INITIAL_BRACKET: (f64, f64) = (1e-2, 1e2);
const MAX_BRACKET_DOUBLINGS: usize = 200;
/// Grid coarsening of the optimistic pre-check in [`calibrate`].
const COARSE_FACTOR: f64 = 50.0;

/// Which single-step mechanism is composed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MechanismAccounting {
    /// Poisson-subsampled Gaussian, one unit per privacy unit.
    SubsampledGaussian { q: f64 },
    /// Mixture of Gaussians: `k` records per privacy unit.
    MixtureOfGaussians { q: f64, k: u64 },
}

impl MechanismAccounting {
    pub fn q(&self) -> f64 {
        match *self {
            Self::SubsampledGaussian { q } | Self::MixtureOfGaussians { q, .. } => q,
        }
    }
}

fn single_step(mechanism: MechanismAccounting, sigma: f64, disc: &Discretization) -> Result<PrivacyLossDistribution> {
    match mechanism {
        MechanismAccounting::SubsampledGaussian { q } => gaussian_pld(sigma, q, disc),
        MechanismAccounting::MixtureOfGaussians { q, k } => mog_pld(sigma, q, k, disc),
    }
}

/// ε(δ) after `steps` compositions at noise multiplier `sigma`.
pub fn account(
    mechanism: MechanismAccounting,
    sigma: f64,
    steps: u64,
    delta: f64,
    disc: &Discretization,
) -> Result<f64> {
    let single = single_step(mechanism, sigma, disc)?;
    if steps == 0 {
        return Ok(0.0);
    }
    compose_with(&single, steps, disc)?.epsilon_for_delta(delta)
}

/// Whether `sigma` meets `(epsilon, delta)`; stops composing early once a
/// partial composition already fails.
fn meets_target(
    mechanism: MechanismAccounting,
    sigma: f64,
    steps: u64,
    epsilon: f64,
    delta: f64,
    disc: &Discretization,
) -> Result<bool> {
    if disc.rounding == Rounding::Pessimistic {
        // Optimistic rounding on a coarse grid lower-bounds ε, so a failure
        // there settles the question cheaply for σ far below the answer.
        let coarse = Discretization {
            grid_spacing: disc.grid_spacing * COARSE_FACTOR,
            rounding: Rounding::Optimistic,
            ..*disc
        };
        let single = single_step(mechanism, sigma, &coarse)?;
        if compose_within(&single, steps.max(1), &coarse, epsilon, delta)?.is_none() {
            return Ok(false);
        }
    }
    let single = single_step(mechanism, sigma, disc)?;
    match compose_within(&single, steps.max(1), disc, epsilon, delta)? {
        Some(pld) => match pld.epsilon_for_delta(delta) {
            Ok(eps) => Ok(eps <= epsilon),
            Err(Error::Unsatisfiable { .. }) => Ok(false),
            Err(e) => Err(e),
        },
        None => Ok(false),
    }
}

/// Smallest σ (to [`BISECTION_TOLERANCE`] relative) whose composed loss meets
/// `(epsilon, delta)`. The upper end of the final bracket is returned, so the
/// result always satisfies the target.
pub fn calibrate(
    mechanism: MechanismAccounting,
    epsilon: f64,
    delta: f64,
    steps: u64,
    disc: &Discretization,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Calibration(format!("target ε must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Calibration(format!("target δ {delta} outside (0, 1)")));
    }
    let meets = |sigma: f64| meets_target(mechanism, sigma, steps, epsilon, delta, disc);

    let (mut lo, mut hi) = INITIAL_BRACKET;
    let mut doublings = 0;
    while !meets(hi)? {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > MAX_BRACKET_DOUBLINGS {
            return Err(Error::Calibration(format!("no σ ≤ {hi:e} reaches ε={epsilon}")));
        }
    }
    let mut halvings = 0;
    while meets(lo)? {
        hi = lo;
        lo /= 2.0;
        halvings += 1;
        if halvings > MAX_BRACKET_DOUBLINGS {
            return Err(Error::Calibration(format!("target ε={epsilon} met for every σ ≥ {lo:e}")));
        }
    }
    while hi / lo - 1.0 >= BISECTION_TOLERANCE {
        let mid = (lo * hi).sqrt();
        if meets(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

fn sampling_rate(population: u64, batch: f64) -> Result<f64> {
    if population == 0 || !(batch > 0.0) || batch > population as f64 {
        return Err(Error::Calibration(format!(
            "expected batch {batch} must lie in (0, {population}]"
        )));
    }
    Ok(batch / population as f64)
}

/// Noise multiplier for DP-SGD over `population` units with expected batch
/// size `batch`, run for `steps` steps.
pub fn calibrate_noise(epsilon: f64, delta: f64, population: u64, batch: f64, steps: u64) -> Result<f64> {
    let q = sampling_rate(population, batch)?;
    calibrate(MechanismAccounting::SubsampledGaussian { q }, epsilon, delta, steps, &Discretization::default())
}

/// As [`calibrate_noise`], for users holding `k` records each.
pub fn calibrate_noise_group(
    k: u64,
    epsilon: f64,
    delta: f64,
    records: u64,
    batch: f64,
    steps: u64,
) -> Result<f64> {
    let q = sampling_rate(records, batch)?;
    if k == 0 {
        return Err(Error::Calibration("k must be at least 1".into()));
    }
    let mechanism = if k == 1 {
        MechanismAccounting::SubsampledGaussian { q }
    } else {
        MechanismAccounting::MixtureOfGaussians { q, k }
    };
    calibrate(mechanism, epsilon, delta, steps, &Discretization::default())
}

/// Noise multiplier obtained by calibrating record-level DP-SGD to the
/// example-level target that the generic group conversion maps onto
/// `(epsilon, delta)`.
pub fn calibrate_noise_naive_group(
    k: u64,
    epsilon: f64,
    delta: f64,
    records: u64,
    batch: f64,
    steps: u64,
    form: GroupConversion,
) -> Result<f64> {
    let (eps_record, delta_record) = naive_group_target(epsilon, delta, k, form)?;
    if !(delta_record > 0.0 && delta_record < 1.0) {
        return Err(Error::Calibration(format!("converted δ {delta_record} is not a probability")));
    }
    calibrate_noise(eps_record, delta_record, records, batch, steps)
}
