//! Posterior of the method means with all hyperparameters known.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::norm_cdf;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedForm {
    pub mean: f64,
    pub variance: f64,
    /// Weight on the sample mean; `1 - shrinkage` goes to `mu0`.
    pub shrinkage: f64,
}

/// Conjugate posterior of `mu_m` given `R` observations with sample mean
/// `y_bar`, known noise sd `sigma`, prior `N(mu0, tau^2)`.
pub fn closed_form_posterior(
    y_bar: f64,
    sigma: f64,
    tau: f64,
    mu0: f64,
    r: usize,
) -> Result<ClosedForm> {
    if !(sigma > 0.0 && tau > 0.0) {
        return Err(Error::invalid("sigma and tau must be positive"));
    }
    let data_prec = r as f64 / (sigma * sigma);
    let prior_prec = 1.0 / (tau * tau);
    let variance = 1.0 / (data_prec + prior_prec);
    let shrinkage = data_prec / (data_prec + prior_prec);
    Ok(ClosedForm {
        mean: variance * (data_prec * y_bar + prior_prec * mu0),
        variance,
        shrinkage,
    })
}

/// `P(mu_A < mu_B)` for independent Gaussian posteriors.
pub fn closed_form_rank_prob(a: &ClosedForm, b: &ClosedForm) -> f64 {
    norm_cdf((b.mean - a.mean) / (a.variance + b.variance).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_worked_case() {
        let p = closed_form_posterior(1.0, 1.0, 1.0, 0.0, 4).unwrap();
        assert!((p.shrinkage - 0.8).abs() < 1e-15);
        assert!((p.mean - 0.8).abs() < 1e-15);
        assert!((p.variance - 0.2).abs() < 1e-15);
    }

    #[test]
    fn limits() {
        let big = closed_form_posterior(0.37, 2.0, 1.0, -1.0, 1_000_000).unwrap();
        assert!((big.shrinkage - 1.0).abs() < 1e-5);
        assert!((big.mean - 0.37).abs() < 1e-5);
        let tight = closed_form_posterior(0.37, 2.0, 1e-9, -1.0, 50).unwrap();
        assert!((tight.mean + 1.0).abs() < 1e-9);
    }

    #[test]
    fn shrinkage_is_monotone() {
        let lam = |r: usize, s: f64| {
            closed_form_posterior(0.0, s, 1.0, 0.0, r)
                .unwrap()
                .shrinkage
        };
        for r in 1..50 {
            assert!(lam(r + 1, 1.5) > lam(r, 1.5));
        }
        for k in 1..50 {
            let s = 0.1 * k as f64;
            assert!(lam(10, s + 0.1) < lam(10, s));
        }
    }

    #[test]
    fn rank_probability_values() {
        let a = ClosedForm {
            mean: 0.0,
            variance: 0.3,
            shrinkage: 1.0,
        };
        assert_eq!(closed_form_rank_prob(&a, &a), 0.5);
        let b = ClosedForm {
            mean: (0.6f64).sqrt(),
            ..a
        };
        assert!((closed_form_rank_prob(&a, &b) - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonpositive_scales() {
        assert!(closed_form_posterior(0.0, 0.0, 1.0, 0.0, 3).is_err());
        assert!(closed_form_posterior(0.0, 1.0, -1.0, 0.0, 3).is_err());
    }
}
