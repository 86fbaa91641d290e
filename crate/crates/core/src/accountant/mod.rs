//! Privacy accounting for user-level DP training.
//!
//! Both mechanisms are accounted by composing discretized privacy loss
//! distributions: the Poisson-subsampled Gaussian for DP-SGD over records or
//! users, and the mixture-of-Gaussians mechanism when a group of `k` records
//! belongs to one user. Noise multipliers are found by bisection.

mod calibrate;
mod pld;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use calibrate::{
    account, calibrate, calibrate_noise, calibrate_noise_group, calibrate_noise_naive_group,
    MechanismAccounting, BISECTION_TOLERANCE, INITIAL_BRACKET,
};
pub use pld::{
    compose, compose_with, gaussian_pld, mog_pld, Discretization, LossPmf, PrivacyLossDistribution,
    Rounding,
};

/// How the generic group-privacy conversion charges δ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupConversion {
    /// `δ · (e^{kε} − 1) / (e^ε − 1)`.
    #[default]
    Standard,
    /// `δ · e^{kε − 1} / (e^ε − 1)`, kept for comparison with that form.
    Literal,
}

/// Converts an example-level `(ε, δ)` guarantee into a user-level one for
/// users contributing at most `k` records.
pub fn naive_group_privacy(epsilon: f64, delta: f64, k: u64, form: GroupConversion) -> Result<(f64, f64)> {
    if !(epsilon > 0.0) || k == 0 {
        return Err(Error::Domain(format!("need ε > 0 and k ≥ 1 (got ε={epsilon}, k={k})")));
    }
    let kf = k as f64;
    let factor = match form {
        GroupConversion::Standard if k == 1 => 1.0,
        GroupConversion::Standard => (kf * epsilon).exp_m1() / epsilon.exp_m1(),
        GroupConversion::Literal => (kf * epsilon - 1.0).exp() / epsilon.exp_m1(),
    };
    Ok((kf * epsilon, delta * factor))
}

/// Example-level target that the naive conversion maps onto the user-level
/// `(epsilon, delta)`.
pub fn naive_group_target(epsilon: f64, delta: f64, k: u64, form: GroupConversion) -> Result<(f64, f64)> {
    let per_record = epsilon / k as f64;
    let (_, factor_delta) = naive_group_privacy(per_record, 1.0, k, form)?;
    Ok((per_record, delta / factor_delta))
}

/// Serialized result of a calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub mechanism: String,
    pub sigma: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub q: f64,
    #[serde(rename = "T")]
    pub steps: u64,
    pub k: u64,
    pub grid_spacing: f64,
    pub rounding: Rounding,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversion_is_identity_for_k1() {
        assert_eq!(naive_group_privacy(0.7, 1e-6, 1, GroupConversion::Standard).unwrap(), (0.7, 1e-6));
    }

    #[test]
    fn conversion_reference_value() {
        let (e, d) = naive_group_privacy(0.5, 1e-6, 3, GroupConversion::Standard).unwrap();
        assert_eq!(e, 1.5);
        let expected = 1e-6 * (1.5f64.exp() - 1.0) / (0.5f64.exp() - 1.0);
        assert!((d - expected).abs() < 1e-18);
        assert!((d - 5.367e-6).abs() < 1e-9, "{d}");
    }

    #[test]
    fn conversion_epsilon_linear_in_k() {
        let eps: Vec<f64> = (1..6)
            .map(|k| naive_group_privacy(0.3, 1e-6, k, GroupConversion::Standard).unwrap().0)
            .collect();
        for w in eps.windows(2) {
            assert!((w[1] - w[0] - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn literal_form_differs() {
        let std = naive_group_privacy(1.0, 1e-6, 4, GroupConversion::Standard).unwrap().1;
        let lit = naive_group_privacy(1.0, 1e-6, 4, GroupConversion::Literal).unwrap().1;
        assert!((lit - 1e-6 * 3f64.exp() / 1f64.exp_m1()).abs() < 1e-15);
        assert!(std != lit);
    }

    #[test]
    fn target_round_trips_through_conversion() {
        let (e, d) = naive_group_target(3.0, 1e-5, 5, GroupConversion::Standard).unwrap();
        let (ue, ud) = naive_group_privacy(e, d, 5, GroupConversion::Standard).unwrap();
        assert!((ue - 3.0).abs() < 1e-12 && (ud - 1e-5).abs() < 1e-18);
    }
}
