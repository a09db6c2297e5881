use ndarray::Array2;
use rand_distr::{Beta, Binomial, Distribution};
use serde::{Deserialize, Serialize};

use super::{ConvergedPosterior, ModelKind};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::stats::{mean, quantile_sorted, sample_variance};

pub const PPC_REPLICATES: usize = 50;
pub const PPC_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];
/// Standardized residuals beyond this count toward the tail statistic.
pub const TAIL_Z: f64 = 3.0;
const TAIL_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub sd: f64,
    pub quantiles: [f64; 5],
}

impl SummaryStats {
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            mean: mean(&v),
            sd: sample_variance(&v).sqrt(),
            quantiles: PPC_QUANTILES.map(|q| quantile_sorted(&v, q)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpcSummary {
    pub observed: SummaryStats,
    pub replicates: Vec<SummaryStats>,
    /// Fraction of observations with |standardized residual| > TAIL_Z,
    /// averaged over the posterior draws used.
    pub tail_observed: f64,
    pub tail_replicated: f64,
    /// Share of draws whose replicate tail fraction reaches the observed one.
    pub tail_p_value: f64,
    pub tail_flag: bool,
}

impl PpcSummary {
    /// How many observed quantiles fall inside the central `coverage` band
    /// of the replicate quantiles.
    pub fn quantiles_in_band(&self, coverage: f64) -> usize {
        let lo = 0.5 * (1.0 - coverage);
        (0..PPC_QUANTILES.len())
            .filter(|&q| {
                let mut rep: Vec<f64> = self.replicates.iter().map(|s| s.quantiles[q]).collect();
                rep.sort_by(f64::total_cmp);
                let a = quantile_sorted(&rep, lo);
                let b = quantile_sorted(&rep, 1.0 - lo);
                (a..=b).contains(&self.observed.quantiles[q])
            })
            .count()
    }
}

/// Replicate the observed table (methods x realizations, rows in label
/// order) from posterior draws. For Beta-Binomial fits `observed` holds
/// covered fractions `k / N`.
pub fn posterior_predictive_check(
    post: &ConvergedPosterior,
    observed: &Array2<f64>,
    seed: u64,
) -> Result<PpcSummary> {
    let fit = post.fit();
    let (m, r) = observed.dim();
    if m != fit.labels.len() {
        return Err(Error::DimensionMismatch {
            expected: fit.labels.len(),
            got: m,
        });
    }
    let s = &fit.samples;
    let col = |name: &str| {
        s.pooled(name)
            .ok_or_else(|| Error::invalid(format!("posterior lacks parameter {name}")))
    };
    let mu: Vec<Vec<f64>> = fit
        .labels
        .iter()
        .map(|l| col(&format!("mu[{l}]")))
        .collect::<Result<_>>()?;
    let total = mu[0].len();
    let mut rng = RngStream::new(seed, "ppc");
    let obs: Vec<f64> = observed.iter().copied().collect();

    // per draw: location and scale of each cell, and a replicate sampler
    let mut replicates = Vec::with_capacity(PPC_REPLICATES);
    let (mut t_obs_sum, mut t_rep_sum, mut exceed) = (0.0, 0.0, 0usize);
    let (sigma, gamma, phi) = match fit.model {
        ModelKind::Gaussian => {
            let sigma: Vec<Vec<f64>> = fit
                .labels
                .iter()
                .map(|l| col(&format!("sigma[{l}]")))
                .collect::<Result<_>>()?;
            let gamma: Vec<Vec<f64>> = (0..r)
                .map(|i| col(&format!("gamma[{i}]")))
                .collect::<Result<_>>()?;
            (sigma, gamma, Vec::new())
        }
        ModelKind::BetaBinomial => (Vec::new(), Vec::new(), col("phi")?),
    };
    let n_test = fit.n_test.unwrap_or(0);

    for _ in 0..PPC_REPLICATES {
        let d = rng.below(total);
        let mut rep = Vec::with_capacity(m * r);
        let mut t_obs = 0usize;
        let mut t_rep = 0usize;
        for j in 0..m {
            for i in 0..r {
                let (loc, scale, y_rep) = match fit.model {
                    ModelKind::Gaussian => {
                        let loc = mu[j][d] + gamma[i][d];
                        let sd = sigma[j][d];
                        (loc, sd, loc + sd * rng.normal())
                    }
                    ModelKind::BetaBinomial => {
                        let p = mu[j][d];
                        let ph = phi[d];
                        let n = n_test as f64;
                        let sd = (p * (1.0 - p) / n * (1.0 + (n - 1.0) / (ph + 1.0))).sqrt();
                        let beta = Beta::new(p * ph, (1.0 - p) * ph)
                            .map_err(|e| Error::invalid(e.to_string()))?;
                        let q = beta.sample(rng.rng_mut());
                        let k = Binomial::new(n_test, q.clamp(0.0, 1.0))
                            .map_err(|e| Error::invalid(e.to_string()))?
                            .sample(rng.rng_mut());
                        (p, sd, k as f64 / n)
                    }
                };
                let y = observed[[j, i]];
                t_obs += ((y - loc).abs() > TAIL_Z * scale) as usize;
                t_rep += ((y_rep - loc).abs() > TAIL_Z * scale) as usize;
                rep.push(y_rep);
            }
        }
        let cells = (m * r) as f64;
        t_obs_sum += t_obs as f64 / cells;
        t_rep_sum += t_rep as f64 / cells;
        exceed += (t_rep >= t_obs) as usize;
        replicates.push(SummaryStats::of(&rep));
    }
    let k = PPC_REPLICATES as f64;
    let tail_p_value = exceed as f64 / k;
    Ok(PpcSummary {
        observed: SummaryStats::of(&obs),
        replicates,
        tail_observed: t_obs_sum / k,
        tail_replicated: t_rep_sum / k,
        tail_p_value,
        tail_flag: tail_p_value < TAIL_ALPHA,
    })
}
