//! Downstream inference on converged posteriors and on the raw metric
//! table: ranking probabilities, detectability, variance scaling,
//! convergence rates and ranking agreement between metrics.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hier::{fit_gaussian, ConvergedPosterior, GaussianBhmSpec, SamplerConfig};
use crate::scoring::{kendall_tau, ranking};
use crate::stats::{mean, norm_cdf, norm_quantile, ols, quantile, sample_variance};
use crate::table::MetricTable;
use crate::types::{MethodId, MetricId};

pub const DEFAULT_POWER: f64 = 0.80;
/// Ranking probabilities outside `[LOW, HIGH]` are called conclusive.
pub const CONCLUSIVE_LOW: f64 = 0.05;
pub const CONCLUSIVE_HIGH: f64 = 0.95;

fn draws(post: &ConvergedPosterior, label: &str) -> Result<Vec<f64>> {
    post.mu_draws(label)
        .ok_or_else(|| Error::invalid(format!("method {label} is not in this fit")))
}

/// `P(mu_A < mu_B)` over joint draws; ties count half.
pub fn rank_probability(post: &ConvergedPosterior, a: &str, b: &str) -> Result<f64> {
    if a == b {
        return Err(Error::invalid(
            "ranking probability needs two distinct methods",
        ));
    }
    let (da, db) = (draws(post, a)?, draws(post, b)?);
    let score: f64 = da
        .iter()
        .zip(&db)
        .map(|(x, y)| {
            if x < y {
                1.0
            } else if x == y {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(score / da.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub n: usize,
    pub metric: MetricId,
    pub labels: Vec<String>,
    pub sample_count: usize,
    /// `(A, B) -> P(A < B)` for every ordered pair of distinct labels.
    pub pair_prob: BTreeMap<(String, String), f64>,
}

impl ComparisonResult {
    pub fn prob(&self, a: &str, b: &str) -> Option<f64> {
        self.pair_prob.get(&(a.to_string(), b.to_string())).copied()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["n", "metric", "a", "b", "p_a_better"])?;
        for ((a, b), p) in &self.pair_prob {
            wr.write_record([
                self.n.to_string(),
                self.metric.as_str().to_string(),
                a.clone(),
                b.clone(),
                p.to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

pub fn compare_all(
    post: &ConvergedPosterior,
    n: usize,
    metric: MetricId,
) -> Result<ComparisonResult> {
    let labels = post.labels().to_vec();
    let mut pair_prob = BTreeMap::new();
    for a in &labels {
        for b in labels.iter().filter(|b| *b != a) {
            pair_prob.insert((a.clone(), b.clone()), rank_probability(post, a, b)?);
        }
    }
    Ok(ComparisonResult {
        n,
        metric,
        sample_count: post.fit().samples.n_chains() * post.fit().samples.n_draws(),
        labels,
        pair_prob,
    })
}

/// How the method-specific variances enter the predictive spread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Posterior means of `sigma_A^2` and `sigma_B^2`.
    #[default]
    PosteriorMean,
    /// Per-draw spreads; the reported `sigma_pred` is their median.
    PerDraw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MddPoint {
    pub n: usize,
    pub gamma: f64,
    pub mean_diff: f64,
    pub var_diff: f64,
    pub sigma_pred: f64,
    pub mdd: f64,
    pub observed_gap: f64,
    pub detect_prob: f64,
}

impl MddPoint {
    /// Assemble a point from the posterior difference moments and the
    /// predictive spread of a replicated difference.
    pub fn from_spread(
        n: usize,
        gamma: f64,
        mean_diff: f64,
        var_diff: f64,
        sigma_pred: f64,
    ) -> Self {
        let z = if gamma == 0.5 {
            0.0
        } else {
            norm_quantile(gamma)
        };
        let observed_gap = mean_diff.abs();
        Self {
            n,
            gamma,
            mean_diff,
            var_diff,
            sigma_pred,
            mdd: z * sigma_pred,
            observed_gap,
            detect_prob: norm_cdf(observed_gap / sigma_pred),
        }
    }

    pub fn detectable(&self) -> bool {
        self.observed_gap >= self.mdd
    }
}

/// Predictive minimum detectable difference between `a` and `b` at power
/// `gamma`.
pub fn mdd(
    post: &ConvergedPosterior,
    a: &str,
    b: &str,
    gamma: f64,
    n: usize,
    mode: VarianceMode,
) -> Result<MddPoint> {
    if a == b {
        return Err(Error::invalid("MDD needs two distinct methods"));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid(format!("power {gamma} outside (0, 1)")));
    }
    let diff: Vec<f64> = draws(post, a)?
        .iter()
        .zip(draws(post, b)?)
        .map(|(x, y)| x - y)
        .collect();
    let mean_diff = mean(&diff);
    let var_diff = sample_variance(&diff);
    let scale = |l: &str| {
        post.scale_draws(l)
            .ok_or_else(|| Error::invalid(format!("no scale parameter for {l}")))
    };
    let (sa, sb) = (scale(a)?, scale(b)?);
    let sigma_pred = match mode {
        VarianceMode::PosteriorMean => {
            let va = mean(&sa.iter().map(|s| s * s).collect::<Vec<_>>());
            let vb = mean(&sb.iter().map(|s| s * s).collect::<Vec<_>>());
            (var_diff + va + vb).sqrt()
        }
        VarianceMode::PerDraw => {
            let per: Vec<f64> = sa
                .iter()
                .zip(&sb)
                .map(|(x, y)| (var_diff + x * x + y * y).sqrt())
                .collect();
            quantile(&per, 0.5)
        }
    };
    Ok(MddPoint::from_spread(
        n, gamma, mean_diff, var_diff, sigma_pred,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MddCurve {
    pub metric: MetricId,
    pub a: String,
    pub b: String,
    pub points: Vec<MddPoint>,
}

impl MddCurve {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "n",
            "metric",
            "a",
            "b",
            "gamma",
            "mdd",
            "observed_gap",
            "detect_prob",
            "sigma_pred",
            "detectable",
        ])?;
        for p in &self.points {
            wr.write_record([
                p.n.to_string(),
                self.metric.as_str().to_string(),
                self.a.clone(),
                self.b.clone(),
                p.gamma.to_string(),
                p.mdd.to_string(),
                p.observed_gap.to_string(),
                p.detect_prob.to_string(),
                p.sigma_pred.to_string(),
                p.detectable().to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub method: MethodId,
    pub metric: MetricId,
    /// Negative slope of log variance on log n.
    pub alpha: f64,
    pub log_c: f64,
    pub r2: f64,
    /// `(n, unbiased variance)` per level used.
    pub levels: Vec<(usize, f64)>,
}

/// OLS of `log Var` on `log n`. Needs three levels and positive variances.
pub fn power_law_from_variances(levels: &[(usize, f64)]) -> Result<(f64, f64, f64)> {
    if levels.len() < 3 {
        return Err(Error::invalid(format!(
            "power-law fit needs at least 3 n levels, got {}",
            levels.len()
        )));
    }
    if let Some((n, _)) = levels.iter().find(|(_, v)| !(*v > 0.0)) {
        return Err(Error::invalid(format!("degenerate variance at n={n}")));
    }
    let x: Vec<f64> = levels.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let y: Vec<f64> = levels.iter().map(|(_, v)| v.ln()).collect();
    let (intercept, slope, r2) = ols(&x, &y);
    Ok((-slope, intercept, r2))
}

pub fn power_law_fit(
    table: &MetricTable,
    method: MethodId,
    metric: MetricId,
) -> Result<PowerLawFit> {
    let mut levels = Vec::new();
    for n in table.n_levels() {
        if let Some(vals) = table.slice(n, metric).get(&method) {
            if vals.len() >= 2 {
                let v: Vec<f64> = vals.values().copied().collect();
                levels.push((n, sample_variance(&v)));
            }
        }
    }
    let (alpha, log_c, r2) = power_law_from_variances(&levels)?;
    Ok(PowerLawFit {
        method,
        metric,
        alpha,
        log_c,
        r2,
        levels,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MddScaling {
    Fitted {
        slope: f64,
        expected: f64,
        deviation: f64,
    },
    InsufficientLevels {
        levels: usize,
    },
}

/// Slope of log MDD on log n against the `-alpha / 2` rate. Descriptive only.
pub fn mdd_scaling_check(alpha: f64, points: &[(usize, f64)]) -> MddScaling {
    let usable: Vec<&(usize, f64)> = points.iter().filter(|(_, m)| *m > 0.0).collect();
    if usable.len() < 3 {
        return MddScaling::InsufficientLevels {
            levels: usable.len(),
        };
    }
    let x: Vec<f64> = usable.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let y: Vec<f64> = usable.iter().map(|(_, m)| m.ln()).collect();
    let (_, slope, _) = ols(&x, &y);
    let expected = -alpha / 2.0;
    MddScaling::Fitted {
        slope,
        expected,
        deviation: slope - expected,
    }
}

/// Converged fraction per `(method, n)`; cells never run are absent.
pub fn convergence_rates(table: &MetricTable) -> BTreeMap<(MethodId, usize), f64> {
    let mut out = BTreeMap::new();
    for m in table.methods() {
        for n in table.n_levels() {
            if let Some(r) = table.convergence_rate(m, n) {
                out.insert((m, n), r);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub method: MethodId,
    pub n: usize,
    pub metric: MetricId,
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

/// Mean and SD across realizations for every populated cell.
pub fn metric_summaries(table: &MetricTable) -> Vec<MetricSummary> {
    let mut out = Vec::new();
    for metric in table.metrics() {
        for n in table.n_levels() {
            for (method, vals) in table.slice(n, metric) {
                let v: Vec<f64> = vals.values().copied().collect();
                out.push(MetricSummary {
                    method,
                    n,
                    metric,
                    mean: mean(&v),
                    sd: if v.len() > 1 {
                        sample_variance(&v).sqrt()
                    } else {
                        f64::NAN
                    },
                    count: v.len(),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KendallSummary {
    pub n: usize,
    pub median: f64,
    pub mean: f64,
    pub realizations: usize,
}

/// Per-realization Kendall tau between the method rankings under two
/// metrics, summarized per n. Only methods with both metrics in a
/// realization take part.
pub fn kendall_by_n(
    table: &MetricTable,
    first: MetricId,
    second: MetricId,
) -> Result<Vec<KendallSummary>> {
    let mut out = Vec::new();
    for n in table.n_levels() {
        let s1 = table.slice(n, first);
        let s2 = table.slice(n, second);
        let mut realizations: Vec<usize> = s1.values().flat_map(|v| v.keys().copied()).collect();
        realizations.sort_unstable();
        realizations.dedup();
        let mut taus = Vec::new();
        for r in realizations {
            let pick = |s: &BTreeMap<MethodId, BTreeMap<usize, f64>>| -> Vec<(MethodId, f64)> {
                s.iter()
                    .filter_map(|(m, v)| v.get(&r).map(|x| (*m, *x)))
                    .filter(|(m, _)| s1.get(m).is_some_and(|v| v.contains_key(&r)))
                    .filter(|(m, _)| s2.get(m).is_some_and(|v| v.contains_key(&r)))
                    .collect()
            };
            let (a, b) = (pick(&s1), pick(&s2));
            if a.len() < 2 {
                continue;
            }
            let ra = ranking(&a, first.lower_is_better());
            let rb = ranking(&b, second.lower_is_better());
            taus.push(kendall_tau(&ra, &rb)?);
        }
        if !taus.is_empty() {
            out.push(KendallSummary {
                n,
                median: quantile(&taus, 0.5),
                mean: mean(&taus),
                realizations: taus.len(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub realizations: usize,
    pub prob: f64,
}

/// Refit the Gaussian model on nested leading subsets of realizations and
/// track `P(a < b)`. Every refit must pass diagnostics.
pub fn sensitivity_to_r(
    labels: &[String],
    y: &ndarray::Array2<f64>,
    a: &str,
    b: &str,
    subsets: &[usize],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<SensitivityPoint>> {
    subsets
        .iter()
        .filter(|&&r| r >= 2 && r <= y.ncols())
        .map(|&r| {
            let sub = y.slice(ndarray::s![.., ..r]).to_owned();
            let post = fit_gaussian(&GaussianBhmSpec::new(labels.to_vec(), sub), cfg, seed)?
                .converged()?;
            Ok(SensitivityPoint {
                realizations: r,
                prob: rank_probability(&post, a, b)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mdd_from_posterior_term_only() {
        let v: f64 = 0.0004;
        // z is the gamma-quantile: 0.8416 at 0.80, 1.2816 at 0.90
        let p = MddPoint::from_spread(50, DEFAULT_POWER, 0.01, v, v.sqrt());
        assert!((p.mdd - 0.841_621_233_572_914_4 * v.sqrt()).abs() < 1e-9);
        let p = MddPoint::from_spread(50, 0.9, 0.01, v, v.sqrt());
        assert!((p.mdd - 1.281_551_565_544_600_5 * v.sqrt()).abs() < 1e-9);
        assert_eq!(MddPoint::from_spread(50, 0.5, 0.01, v, 0.02).mdd, 0.0);
    }

    #[test]
    fn detectability_agrees_with_detect_prob() {
        for k in 0..200 {
            let gap = k as f64 * 0.0005;
            for gamma in [0.6, 0.8, 0.9] {
                let p = MddPoint::from_spread(50, gamma, gap, 1e-4, 0.02);
                assert_eq!(
                    p.detectable(),
                    p.detect_prob >= gamma,
                    "gap {gap} gamma {gamma}"
                );
            }
        }
        let lo = MddPoint::from_spread(50, 0.7, 0.0, 1e-4, 0.02).mdd;
        let hi = MddPoint::from_spread(50, 0.9, 0.0, 1e-4, 0.02).mdd;
        assert!(lo < hi);
    }

    #[test]
    fn planted_power_law_is_recovered() {
        for alpha in [0.5, 0.83, 1.0, 1.7] {
            let levels: Vec<(usize, f64)> = [30, 50, 100, 200, 500]
                .iter()
                .map(|&n| (n, 3.0 * (n as f64).powf(-alpha)))
                .collect();
            let (a, c, r2) = power_law_from_variances(&levels).unwrap();
            assert!((a - alpha).abs() < 1e-12, "{a} vs {alpha}");
            assert!((c - 3f64.ln()).abs() < 1e-11);
            assert!((r2 - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn power_law_guards() {
        assert!(power_law_from_variances(&[(30, 1.0), (50, 0.5)]).is_err());
        assert!(power_law_from_variances(&[(30, 1.0), (50, 0.0), (100, 0.2)]).is_err());
    }

    #[test]
    fn mdd_scaling_on_constructed_curve() {
        let pts: Vec<(usize, f64)> = [30, 50, 100, 200, 500]
            .iter()
            .map(|&n| (n, 0.7 * (n as f64).powf(-0.4)))
            .collect();
        match mdd_scaling_check(0.8, &pts) {
            MddScaling::Fitted {
                slope, deviation, ..
            } => {
                assert!((slope + 0.4).abs() < 1e-12);
                assert!(deviation.abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            mdd_scaling_check(0.8, &pts[..2]),
            MddScaling::InsufficientLevels { levels: 2 }
        );
    }
}
