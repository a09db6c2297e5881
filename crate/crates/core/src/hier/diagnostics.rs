//! Rank-normalized split-R-hat and bulk effective sample size.

use serde::{Deserialize, Serialize};

use super::samples::PosteriorSamples;
use crate::stats::norm_quantile;

pub const RHAT_MAX: f64 = 1.01;
pub const ESS_MIN: f64 = 400.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDiagnostic {
    pub name: String,
    pub rhat: f64,
    pub bulk_ess: f64,
    /// All draws identical: R-hat is undefined and ESS is reported as 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub params: Vec<ParamDiagnostic>,
    pub max_rhat: f64,
    pub min_ess: f64,
    /// Always zero for the Metropolis-within-Gibbs samplers; kept so the
    /// report layout matches gradient-based samplers.
    pub divergent: usize,
    pub passed: bool,
}

impl Diagnostics {
    pub fn from_params(params: Vec<ParamDiagnostic>) -> Self {
        let max_rhat = params
            .iter()
            .map(|p| if p.degenerate { f64::INFINITY } else { p.rhat })
            .fold(f64::NEG_INFINITY, f64::max);
        let min_ess = params
            .iter()
            .map(|p| p.bulk_ess)
            .fold(f64::INFINITY, f64::min);
        let passed = !params.is_empty() && max_rhat <= RHAT_MAX && min_ess >= ESS_MIN;
        Self {
            params,
            max_rhat,
            min_ess,
            divergent: 0,
            passed,
        }
    }
}

pub fn compute_diagnostics(samples: &PosteriorSamples) -> Diagnostics {
    let params = (0..samples.names().len())
        .map(|j| {
            let chains = samples.chains_of(j);
            let (rhat, bulk_ess, degenerate) = param_diagnostic(&chains);
            ParamDiagnostic {
                name: samples.names()[j].clone(),
                rhat,
                bulk_ess,
                degenerate,
            }
        })
        .collect();
    Diagnostics::from_params(params)
}

/// `(rhat, bulk_ess, degenerate)` for one parameter.
pub fn param_diagnostic(chains: &[Vec<f64>]) -> (f64, f64, bool) {
    let first = chains.first().and_then(|c| c.first()).copied();
    let degenerate = chains.iter().flatten().all(|v| Some(*v) == first);
    if degenerate {
        return (f64::NAN, 0.0, true);
    }
    (rank_rhat(chains), bulk_ess(chains), false)
}

/// Split each chain into its first and last halves (a middle draw of an
/// odd-length chain is dropped).
pub fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let h = c.len() / 2;
        out.push(c[..h].to_vec());
        out.push(c[c.len() - h..].to_vec());
    }
    out
}

/// Replace draws by normal scores of their pooled ranks (average ranks
/// for ties), `Phi^-1((r - 3/8) / (S + 1/4))`.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut flat: Vec<(f64, usize, usize)> = Vec::new();
    for (c, ch) in chains.iter().enumerate() {
        for (d, v) in ch.iter().enumerate() {
            flat.push((*v, c, d));
        }
    }
    let s = flat.len() as f64;
    flat.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < flat.len() {
        let mut j = i;
        while j + 1 < flat.len() && flat[j + 1].0 == flat[i].0 {
            j += 1;
        }
        let rank = 0.5 * ((i + 1) + (j + 1)) as f64;
        let z = norm_quantile((rank - 0.375) / (s + 0.25));
        for item in &flat[i..=j] {
            out[item.1][item.2] = z;
        }
        i = j + 1;
    }
    out
}

/// Classic potential scale reduction of already-split chains.
pub fn basic_rhat(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Max of bulk and folded rank-normalized split-R-hat.
pub fn rank_rhat(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    let bulk = basic_rhat(&rank_normalize(&split));
    let mut all: Vec<f64> = split.iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    let med = crate::stats::quantile_sorted(&all, 0.5);
    let folded: Vec<Vec<f64>> = split
        .iter()
        .map(|c| c.iter().map(|v| (v - med).abs()).collect())
        .collect();
    let tail = basic_rhat(&rank_normalize(&folded));
    bulk.max(tail)
}

pub fn bulk_ess(chains: &[Vec<f64>]) -> f64 {
    ess(&rank_normalize(&split_chains(chains)))
}

fn autocovariance(c: &[f64], mean: f64, lag: usize) -> f64 {
    let n = c.len();
    (0..n - lag)
        .map(|t| (c[t] - mean) * (c[t + lag] - mean))
        .sum::<f64>()
        / n as f64
}

/// Effective sample size with Geyer's initial monotone sequence, combining
/// within- and between-chain variance.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    if n < 4 {
        return 0.0;
    }
    let means: Vec<f64> = chains
        .iter()
        .map(|c| c.iter().sum::<f64>() / n as f64)
        .collect();
    let acov0: Vec<f64> = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| autocovariance(c, *mu, 0))
        .collect();
    let chain_var: Vec<f64> = acov0
        .iter()
        .map(|a| a * n as f64 / (n as f64 - 1.0))
        .collect();
    let mean_var = chain_var.iter().sum::<f64>() / m as f64;
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        let g = means.iter().sum::<f64>() / m as f64;
        var_plus += means.iter().map(|x| (x - g).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    }
    if !(var_plus > 0.0) {
        return 0.0;
    }
    let rho = |lag: usize| -> f64 {
        let mean_acov = chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| autocovariance(c, *mu, lag))
            .sum::<f64>()
            / m as f64;
        1.0 - (mean_var - mean_acov) / var_plus
    };
    let mut rho_hat = vec![0.0; n + 2];
    let mut even = 1.0;
    rho_hat[0] = even;
    let mut odd = rho(1);
    rho_hat[1] = odd;
    let mut s = 1;
    while s + 4 < n && even + odd > 0.0 {
        even = rho(s + 1);
        odd = rho(s + 2);
        if even + odd >= 0.0 {
            rho_hat[s + 1] = even;
            rho_hat[s + 2] = odd;
        }
        s += 2;
    }
    let max_s = s;
    if even > 0.0 {
        rho_hat[max_s + 1] = even;
    }
    let mut t = 1;
    while t + 3 <= max_s {
        if rho_hat[t + 1] + rho_hat[t + 2] > rho_hat[t - 1] + rho_hat[t] {
            rho_hat[t + 1] = 0.5 * (rho_hat[t - 1] + rho_hat[t]);
            rho_hat[t + 2] = rho_hat[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tau = -1.0 + 2.0 * rho_hat[..max_s].iter().sum::<f64>() + rho_hat[max_s + 1];
    (total / tau).min(total * total.log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn iid_chains(seed: u64, m: usize, n: usize) -> Vec<Vec<f64>> {
        let mut rng = RngStream::new(seed, "iid");
        (0..m)
            .map(|_| (0..n).map(|_| rng.normal()).collect())
            .collect()
    }

    #[test]
    fn iid_chains_pass() {
        for seed in 0..5 {
            let c = iid_chains(seed, 4, 1000);
            let (rhat, e, deg) = param_diagnostic(&c);
            assert!(!deg);
            assert!(rhat < 1.01, "rhat {rhat}");
            assert!(e > 400.0, "ess {e}");
        }
    }

    #[test]
    fn offset_chain_fails() {
        let mut c = iid_chains(7, 4, 1000);
        for v in c[0].iter_mut() {
            *v += 5.0;
        }
        assert!(rank_rhat(&c) > 1.2);
    }

    #[test]
    fn constant_chains_are_degenerate() {
        let c = vec![vec![3.0; 100]; 4];
        let (_, e, deg) = param_diagnostic(&c);
        assert!(deg);
        assert_eq!(e, 0.0);
    }

    #[test]
    fn ar1_ess_tracks_theory() {
        // AR(1) with phi = 0.5: ESS/N = (1 - phi)/(1 + phi) = 1/3.
        let mut rng = RngStream::new(3, "ar1");
        let phi: f64 = 0.5;
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..5000)
                    .map(|_| {
                        x = phi * x + (1.0 - phi * phi).sqrt() * rng.normal();
                        x
                    })
                    .collect()
            })
            .collect();
        let e = ess(&chains) / 20000.0;
        assert!((e - 1.0 / 3.0).abs() < 0.05, "{e}");
    }

    #[test]
    fn rank_normalize_handles_ties() {
        let c = vec![vec![1.0, 1.0, 2.0], vec![3.0, 1.0, 2.0]];
        let z = rank_normalize(&c);
        assert_eq!(z[0][0], z[0][1]);
        assert_eq!(z[0][0], z[1][1]);
        assert!(z[1][0] > z[0][2]);
    }
}
