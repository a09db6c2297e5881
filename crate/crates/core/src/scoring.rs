//! Proper scoring rules and interval metrics over predictive distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::stats::{norm_cdf, norm_pdf, norm_quantile, LN_SQRT_2PI};
use crate::table::CoveredCount;
use crate::types::{MethodId, MetricId};

/// Samples drawn per test point for mixture CRPS.
pub const CRPS_MIXTURE_SAMPLES: usize = 2048;
pub const NOMINAL_LEVEL: f64 = 0.90;
pub const MAP_SIGMA_FLOOR: f64 = 0.05;
const BISECTION_TOL: f64 = 1e-8;
const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// Per-test-point predictive law produced by a method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictiveDistribution {
    Gaussian {
        mu: Vec<f64>,
        sigma: Vec<f64>,
    },
    /// Equal-weight Gaussian mixture. `mu[i]` holds the component means for
    /// test point `i`; every point has the same component count.
    Mixture {
        mu: Vec<Vec<f64>>,
        sigma: Vec<Vec<f64>>,
    },
    /// Calibrated interval with a Gaussian matched to its width.
    Interval {
        lower: Vec<f64>,
        upper: Vec<f64>,
        level: f64,
        mu: Vec<f64>,
        sigma: Option<Vec<f64>>,
    },
}

impl PredictiveDistribution {
    pub fn test_size(&self) -> usize {
        match self {
            PredictiveDistribution::Gaussian { mu, .. } => mu.len(),
            PredictiveDistribution::Mixture { mu, .. } => mu.len(),
            PredictiveDistribution::Interval { lower, .. } => lower.len(),
        }
    }

    /// Components per test point (1 for single Gaussians and intervals).
    pub fn components(&self) -> usize {
        match self {
            PredictiveDistribution::Mixture { mu, .. } => mu.first().map_or(0, Vec::len),
            _ => 1,
        }
    }

    /// Predictive mean at each test point.
    pub fn mean(&self) -> Vec<f64> {
        match self {
            PredictiveDistribution::Gaussian { mu, .. }
            | PredictiveDistribution::Interval { mu, .. } => mu.clone(),
            PredictiveDistribution::Mixture { mu, .. } => mu
                .iter()
                .map(|c| c.iter().sum::<f64>() / c.len() as f64)
                .collect(),
        }
    }

    /// Check the structural invariants: positive scales, matching shapes,
    /// ordered interval bounds.
    pub fn validate(&self) -> Result<()> {
        let positive = |s: &[f64]| s.iter().all(|v| *v > 0.0 && v.is_finite());
        let ok = match self {
            PredictiveDistribution::Gaussian { mu, sigma } => {
                mu.len() == sigma.len() && positive(sigma)
            }
            PredictiveDistribution::Mixture { mu, sigma } => {
                let k = self.components();
                k > 0
                    && mu.len() == sigma.len()
                    && mu
                        .iter()
                        .zip(sigma)
                        .all(|(m, s)| m.len() == k && s.len() == k && positive(s))
            }
            PredictiveDistribution::Interval {
                lower,
                upper,
                mu,
                sigma,
                ..
            } => {
                lower.len() == upper.len()
                    && mu.len() == lower.len()
                    && lower.iter().zip(upper).all(|(l, u)| l <= u)
                    && sigma
                        .as_ref()
                        .is_none_or(|s| s.len() == mu.len() && positive(s))
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("malformed predictive distribution"))
        }
    }
}

/// Closed-form CRPS of `N(mu, sigma^2)` at `y`.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("CRPS needs sigma > 0, got {sigma}")));
    }
    let z = (y - mu) / sigma;
    Ok(sigma * (z * (2.0 * norm_cdf(z) - 1.0) + 2.0 * norm_pdf(z) - FRAC_1_SQRT_PI))
}

/// Energy-form CRPS estimate from samples:
/// `mean|X_i - y| - 0.5 * mean_{i,j}|X_i - X_j|`, the second mean taken
/// over all ordered pairs including `i = j`. Sorts `samples` in place.
pub fn crps_sample(samples: &mut [f64], y: f64) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::invalid("sample CRPS needs at least two samples"));
    }
    samples.sort_unstable_by(f64::total_cmp);
    let nf = n as f64;
    let mut abs_dev = 0.0;
    let mut pair = 0.0;
    for (i, x) in samples.iter().enumerate() {
        abs_dev += (x - y).abs();
        pair += (2.0 * i as f64 - nf + 1.0) * x;
    }
    // sum_{i,j} |x_i - x_j| = 2 * sum_i (2i - n + 1) x_(i)
    Ok(abs_dev / nf - pair / (nf * nf))
}

fn mixture_cdf(mu: &[f64], sigma: &[f64], x: f64) -> f64 {
    let k = mu.len() as f64;
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| norm_cdf((x - m) / s))
        .sum::<f64>()
        / k
}

/// Mixture quantile by bisection on the CDF.
pub fn mixture_quantile(mu: &[f64], sigma: &[f64], p: f64) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (m, s) in mu.iter().zip(sigma) {
        lo = lo.min(m - 10.0 * s);
        hi = hi.max(m + 10.0 * s);
    }
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mixture_cdf(mu, sigma, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Mean CRPS over test points. Mixtures use the sample estimator with
/// [`CRPS_MIXTURE_SAMPLES`] draws per point from `rng`.
pub fn crps(dist: &PredictiveDistribution, ys: &[f64], rng: &mut RngStream) -> Result<f64> {
    check_len(dist, ys)?;
    let total = match dist {
        PredictiveDistribution::Gaussian { mu, sigma } => {
            let mut t = 0.0;
            for i in 0..ys.len() {
                t += crps_gaussian(mu[i], sigma[i], ys[i])?;
            }
            t
        }
        PredictiveDistribution::Interval { mu, sigma, .. } => {
            let sigma = sigma.as_ref().ok_or_else(|| {
                Error::invalid("interval distribution lacks a Gaussianized sigma")
            })?;
            let mut t = 0.0;
            for i in 0..ys.len() {
                t += crps_gaussian(mu[i], sigma[i], ys[i])?;
            }
            t
        }
        PredictiveDistribution::Mixture { mu, sigma } => {
            let k = dist.components();
            let mut buf = vec![0.0; CRPS_MIXTURE_SAMPLES];
            let mut t = 0.0;
            for i in 0..ys.len() {
                for b in buf.iter_mut() {
                    let c = rng.below(k);
                    *b = mu[i][c] + sigma[i][c] * rng.normal();
                }
                t += crps_sample(&mut buf, ys[i])?;
            }
            t
        }
    };
    Ok(total / ys.len() as f64)
}

fn gaussian_nll_sigma(mu: f64, sigma: f64, y: f64) -> f64 {
    let z = (y - mu) / sigma;
    0.5 * z * z + sigma.ln() + LN_SQRT_2PI
}

/// Mean negative log predictive density. Component scales are raised to
/// `sigma_floor` when one is given.
pub fn nll(dist: &PredictiveDistribution, ys: &[f64], sigma_floor: Option<f64>) -> Result<f64> {
    check_len(dist, ys)?;
    let floor = |s: f64| sigma_floor.map_or(s, |f| s.max(f));
    let total: f64 = match dist {
        PredictiveDistribution::Gaussian { mu, sigma } => (0..ys.len())
            .map(|i| gaussian_nll_sigma(mu[i], floor(sigma[i]), ys[i]))
            .sum(),
        PredictiveDistribution::Interval { mu, sigma, .. } => {
            let sigma = sigma.as_ref().ok_or_else(|| {
                Error::invalid("interval distribution lacks a Gaussianized sigma")
            })?;
            (0..ys.len())
                .map(|i| gaussian_nll_sigma(mu[i], floor(sigma[i]), ys[i]))
                .sum()
        }
        PredictiveDistribution::Mixture { mu, sigma } => {
            let k = dist.components() as f64;
            (0..ys.len())
                .map(|i| {
                    let logs: Vec<f64> = mu[i]
                        .iter()
                        .zip(&sigma[i])
                        .map(|(m, s)| -gaussian_nll_sigma(*m, floor(*s), ys[i]))
                        .collect();
                    let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = mx + logs.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
                    -(lse - k.ln())
                })
                .sum()
        }
    };
    Ok(total / ys.len() as f64)
}

/// Central prediction interval at `level` for each test point.
pub fn interval_at(dist: &PredictiveDistribution, level: f64) -> Result<Vec<(f64, f64)>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!(
            "interval level {level} outside (0, 1)"
        )));
    }
    let tail = 0.5 * (1.0 - level);
    Ok(match dist {
        PredictiveDistribution::Gaussian { mu, sigma } => {
            let z = norm_quantile(1.0 - tail);
            mu.iter()
                .zip(sigma)
                .map(|(m, s)| (m - z * s, m + z * s))
                .collect()
        }
        PredictiveDistribution::Mixture { mu, sigma } => mu
            .iter()
            .zip(sigma)
            .map(|(m, s)| {
                (
                    mixture_quantile(m, s, tail),
                    mixture_quantile(m, s, 1.0 - tail),
                )
            })
            .collect(),
        PredictiveDistribution::Interval { lower, upper, .. } => {
            lower.iter().copied().zip(upper.iter().copied()).collect()
        }
    })
}

/// Covered count and mean interval width at `level`.
pub fn picp_mpiw(
    dist: &PredictiveDistribution,
    ys: &[f64],
    level: f64,
) -> Result<(CoveredCount, f64)> {
    check_len(dist, ys)?;
    let iv = interval_at(dist, level)?;
    Ok(coverage_from_intervals(&iv, ys))
}

pub fn coverage_from_intervals(iv: &[(f64, f64)], ys: &[f64]) -> (CoveredCount, f64) {
    let covered = iv
        .iter()
        .zip(ys)
        .filter(|((l, u), y)| *l <= **y && **y <= *u)
        .count();
    let width = iv.iter().map(|(l, u)| u - l).sum::<f64>() / iv.len() as f64;
    (
        CoveredCount {
            covered: covered as u64,
            n_test: iv.len() as u64,
        },
        width,
    )
}

/// Winkler interval score of a single interval at miss rate `alpha`.
pub fn winkler(lower: f64, upper: f64, y: f64, alpha: f64) -> f64 {
    (upper - lower) + (2.0 / alpha) * (lower - y).max(0.0) + (2.0 / alpha) * (y - upper).max(0.0)
}

pub fn interval_score_from_intervals(iv: &[(f64, f64)], ys: &[f64], alpha: f64) -> f64 {
    iv.iter()
        .zip(ys)
        .map(|((l, u), y)| winkler(*l, *u, *y, alpha))
        .sum::<f64>()
        / ys.len() as f64
}

/// Mean Winkler score of the central `1 - alpha` interval.
pub fn interval_score(dist: &PredictiveDistribution, ys: &[f64], alpha: f64) -> Result<f64> {
    check_len(dist, ys)?;
    let iv = interval_at(dist, 1.0 - alpha)?;
    Ok(interval_score_from_intervals(&iv, ys, alpha))
}

fn check_len(dist: &PredictiveDistribution, ys: &[f64]) -> Result<()> {
    if dist.test_size() != ys.len() || ys.is_empty() {
        return Err(Error::DimensionMismatch {
            expected: dist.test_size(),
            got: ys.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub metric: MetricId,
    pub value: f64,
    pub covered: Option<CoveredCount>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub level: f64,
    pub sigma_floor: Option<f64>,
}

impl ScoringConfig {
    /// Defaults per method: the NLL sigma floor is applied to MAP only.
    pub fn for_method(method: MethodId) -> Self {
        Self {
            level: NOMINAL_LEVEL,
            sigma_floor: (method == MethodId::Map).then_some(MAP_SIGMA_FLOOR),
        }
    }
}

/// Score one predictive distribution on every metric.
pub fn evaluate(
    dist: &PredictiveDistribution,
    ys: &[f64],
    cfg: ScoringConfig,
    rng: &mut RngStream,
) -> Result<Vec<MetricResult>> {
    dist.validate()?;
    check_len(dist, ys)?;
    let iv = interval_at(dist, cfg.level)?;
    let (count, width) = coverage_from_intervals(&iv, ys);
    let alpha = 1.0 - cfg.level;
    Ok(vec![
        MetricResult {
            metric: MetricId::Crps,
            value: crps(dist, ys, rng)?,
            covered: None,
        },
        MetricResult {
            metric: MetricId::Nll,
            value: nll(dist, ys, cfg.sigma_floor)?,
            covered: None,
        },
        MetricResult {
            metric: MetricId::Picp,
            value: count.fraction(),
            covered: Some(count),
        },
        MetricResult {
            metric: MetricId::Mpiw,
            value: width,
            covered: None,
        },
        MetricResult {
            metric: MetricId::IntervalScore,
            value: interval_score_from_intervals(&iv, ys, alpha),
            covered: None,
        },
    ])
}

/// Methods ordered best-first by value; ties broken by method id.
pub fn ranking(values: &[(MethodId, f64)], lower_is_better: bool) -> Vec<MethodId> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| {
        let ord = if lower_is_better {
            a.1.total_cmp(&b.1)
        } else {
            b.1.total_cmp(&a.1)
        };
        ord.then(a.0.cmp(&b.0))
    });
    v.into_iter().map(|(m, _)| m).collect()
}

/// Kendall tau between two orderings of the same method set.
pub fn kendall_tau(a: &[MethodId], b: &[MethodId]) -> Result<f64> {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort();
    sb.sort();
    sa.dedup();
    if sa != sb || sa.len() != a.len() {
        return Err(Error::invalid("rankings cover different method sets"));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("Kendall tau needs at least two methods"));
    }
    let pos_b = |m: MethodId| b.iter().position(|x| *x == m).expect("same set");
    let rb: Vec<usize> = a.iter().map(|m| pos_b(*m)).collect();
    let mut score = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            // a ranks i before j; concordant iff b agrees
            score += if rb[i] < rb[j] { 1 } else { -1 };
        }
    }
    Ok(score as f64 / (n * (n - 1) / 2) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use MethodId::*;

    fn gaussian(mu: Vec<f64>, sigma: Vec<f64>) -> PredictiveDistribution {
        PredictiveDistribution::Gaussian { mu, sigma }
    }

    #[test]
    fn crps_standard_normal_at_mode() {
        // numerical integration of (Phi(t) - 1{t >= 0})^2 gives 0.23370
        let v = crps_gaussian(0.0, 1.0, 0.0).unwrap();
        assert!((v - 0.233_695_2).abs() < 1e-6, "{v}");
    }

    #[test]
    fn crps_point_mass_limit_and_error() {
        assert!(crps_gaussian(1.0, 1e-12, 1.0).unwrap() < 1e-11);
        assert!(crps_gaussian(0.0, 0.0, 1.0).is_err());
        assert!(crps_gaussian(0.0, -1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn crps_scale_equivariance(mu in -5.0f64..5.0, sigma in 0.01f64..5.0, y in -5.0f64..5.0, a in 0.1f64..10.0) {
            let lhs = crps_gaussian(a * mu, a * sigma, a * y).unwrap();
            let rhs = a * crps_gaussian(mu, sigma, y).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn sample_crps_hand_cases() {
        let mut all_y = vec![2.0; 10];
        assert_eq!(crps_sample(&mut all_y, 2.0).unwrap(), 0.0);
        let mut two = vec![3.0, 1.0];
        assert!((crps_sample(&mut two, 2.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(crps_sample(&mut [1.0], 1.0).is_err());
    }

    #[test]
    fn nll_reference_cases() {
        let d = gaussian(vec![0.0], vec![1.0]);
        assert!((nll(&d, &[0.0], None).unwrap() - 0.918_938_533_204_672_7).abs() < 1e-12);
        let m = PredictiveDistribution::Mixture {
            mu: vec![vec![0.0, 0.0]],
            sigma: vec![vec![1.0, 1.0]],
        };
        for y in [-1.3, 0.0, 2.2] {
            assert!((nll(&m, &[y], None).unwrap() - nll(&d, &[y], None).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn collapsed_sigma_nll_floor() {
        let ys: Vec<f64> = (0..20)
            .map(|i| 0.3 * ((i as f64) - 10.0) / 10.0 + 0.2)
            .collect();
        let d = gaussian(vec![0.0; 20], vec![1e-4; 20]);
        let raw = nll(&d, &ys, None).unwrap();
        let floored = nll(&d, &ys, Some(MAP_SIGMA_FLOOR)).unwrap();
        assert!(raw > 1e6, "{raw}");
        assert!(floored.is_finite() && floored < 100.0);
    }

    #[test]
    fn interval_without_sigma_rejects_nll() {
        let d = PredictiveDistribution::Interval {
            lower: vec![-1.0],
            upper: vec![1.0],
            level: 0.9,
            mu: vec![0.0],
            sigma: None,
        };
        assert!(nll(&d, &[0.0], None).is_err());
    }

    #[test]
    fn gaussian_interval_quantiles() {
        let iv = interval_at(&gaussian(vec![0.0], vec![1.0]), 0.9).unwrap();
        assert!((iv[0].0 + 1.6449).abs() < 1e-4 && (iv[0].1 - 1.6449).abs() < 1e-4);
    }

    #[test]
    fn symmetric_mixture_interval_is_symmetric() {
        let m = PredictiveDistribution::Mixture {
            mu: vec![vec![-1.5, 1.5]],
            sigma: vec![vec![1.0, 1.0]],
        };
        let (l, u) = interval_at(&m, 0.9).unwrap()[0];
        assert!((l + u).abs() < 1e-7, "{l} {u}");
    }

    #[test]
    fn mixture_quantile_round_trips_through_cdf() {
        let mut rng = RngStream::new(1, "mix");
        for _ in 0..50 {
            let mu: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let sigma: Vec<f64> = (0..5).map(|_| 0.2 + rng.uniform()).collect();
            for p in [0.05, 0.95] {
                let q = mixture_quantile(&mu, &sigma, p);
                assert!((mixture_cdf(&mu, &sigma, q) - p).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn coverage_extremes() {
        let ys = [0.0, 1.0, 2.0];
        let wide = gaussian(vec![1.0; 3], vec![100.0; 3]);
        let (k, _) = picp_mpiw(&wide, &ys, 0.9).unwrap();
        assert_eq!(k.covered, 3);
        assert_eq!(k.fraction(), 1.0);

        let zero = PredictiveDistribution::Interval {
            lower: vec![0.5, 1.5, 2.5],
            upper: vec![0.5, 1.5, 2.5],
            level: 0.9,
            mu: vec![0.5, 1.5, 2.5],
            sigma: None,
        };
        let (k, w) = picp_mpiw(&zero, &ys, 0.9).unwrap();
        assert_eq!((k.covered, w), (0, 0.0));
    }

    #[test]
    fn winkler_branches() {
        assert_eq!(winkler(-1.0, 1.0, 0.3, 0.1), 2.0);
        let delta = 0.25;
        assert!((winkler(-1.0, 1.0, 1.0 + delta, 0.1) - (2.0 + 20.0 * delta)).abs() < 1e-12);
        assert!((winkler(-1.0, 1.0, -1.0 - delta, 0.1) - (2.0 + 20.0 * delta)).abs() < 1e-12);
    }

    #[test]
    fn wider_predictive_scores_worse_interval_score() {
        let mut rng = RngStream::new(3, "is");
        let ys: Vec<f64> = (0..10_000).map(|_| rng.normal()).collect();
        let truth = gaussian(vec![0.0; ys.len()], vec![1.0; ys.len()]);
        let wide = gaussian(vec![0.0; ys.len()], vec![2.0; ys.len()]);
        assert!(
            interval_score(&truth, &ys, 0.1).unwrap() < interval_score(&wide, &ys, 0.1).unwrap()
        );
    }

    #[test]
    fn true_predictive_beats_perturbations() {
        let mut rng = RngStream::new(4, "propriety");
        let n = 10_000;
        let ys: Vec<f64> = (0..n).map(|_| 0.5 + 2.0 * rng.normal()).collect();
        let truth = gaussian(vec![0.5; n], vec![2.0; n]);
        let base_crps = crps(&truth, &ys, &mut rng).unwrap();
        let base_nll = nll(&truth, &ys, None).unwrap();
        for k in 0..20 {
            let dm = 0.3 * ((k % 5) as f64 - 2.0);
            let ds = [0.7, 0.85, 1.0, 1.2, 1.4][k / 4 % 5];
            if dm == 0.0 && ds == 1.0 {
                continue;
            }
            let pert = gaussian(vec![0.5 + dm; n], vec![2.0 * ds; n]);
            assert!(crps(&pert, &ys, &mut rng).unwrap() > base_crps);
            assert!(nll(&pert, &ys, None).unwrap() > base_nll);
        }
    }

    #[test]
    fn kendall_tau_cases() {
        assert_eq!(kendall_tau(&[Map, Mcd, Cp], &[Map, Mcd, Cp]).unwrap(), 1.0);
        assert_eq!(kendall_tau(&[Map, Mcd, Cp], &[Cp, Mcd, Map]).unwrap(), -1.0);
        // (1,2,3,4) vs (1,3,2,4): 5 concordant, 1 discordant
        let t = kendall_tau(&[Map, Mcd, Ensemble, Bbb], &[Map, Ensemble, Mcd, Bbb]).unwrap();
        assert!((t - 4.0 / 6.0).abs() < 1e-15);
        assert!(kendall_tau(&[Map, Mcd], &[Map, Cp]).is_err());
    }

    #[test]
    fn ranking_breaks_ties_by_method() {
        let r = ranking(&[(Cp, 0.1), (Map, 0.1), (Mcd, 0.05)], true);
        assert_eq!(r, vec![Mcd, Map, Cp]);
        let r = ranking(&[(Cp, 0.9), (Map, 0.1)], false);
        assert_eq!(r, vec![Cp, Map]);
    }
}
