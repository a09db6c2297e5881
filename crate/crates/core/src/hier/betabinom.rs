//! Beta-Binomial model for coverage counts:
//!
//! ```text
//! k[m,i] ~ BetaBinomial(N, mu[m], phi)     a = mu phi, b = (1 - mu) phi
//! logit(mu[m]) ~ N(mu0, tau^2)
//! mu0 ~ N(0, 1)   tau ~ HalfNormal(1)   phi / PHI_PRIOR_SCALE ~ HalfNormal(1)
//! ```

use ndarray::Array2;
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use super::{
    compute_diagnostics, half_normal_init, param_name, Fit, ModelKind, PosteriorSamples, RwScale,
    SamplerConfig,
};
use crate::error::{Error, Result};
use crate::rng::RngStream;

pub const PHI_PRIOR_SCALE: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct BetaBinomSpec {
    pub labels: Vec<String>,
    /// Covered counts, methods x realizations.
    pub k: Array2<u64>,
    pub n_test: u64,
    pub phi_prior_scale: f64,
}

impl BetaBinomSpec {
    pub fn new(labels: Vec<String>, k: Array2<u64>, n_test: u64) -> Self {
        Self {
            labels,
            k,
            n_test,
            phi_prior_scale: PHI_PRIOR_SCALE,
        }
    }

    fn validate(&self) -> Result<()> {
        let (m, r) = self.k.dim();
        if m < 1 || r < 2 {
            return Err(Error::invalid(format!(
                "Beta-Binomial fit needs at least 1 method and 2 realizations, got {m} x {r}"
            )));
        }
        if self.labels.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: self.labels.len(),
            });
        }
        if self.n_test == 0 || self.k.iter().any(|k| *k > self.n_test) {
            return Err(Error::InvalidCount {
                covered: self.k.iter().copied().max().unwrap_or(0),
                n_test: self.n_test,
            });
        }
        if !(self.phi_prior_scale > 0.0) {
            return Err(Error::invalid("phi prior scale must be positive"));
        }
        Ok(())
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Log-likelihood of one method's counts, without the binomial coefficient.
fn column_loglik(k: &[f64], n: f64, logit_mu: f64, phi: f64) -> f64 {
    let mu = logistic(logit_mu);
    let a = mu * phi;
    let b = (1.0 - mu) * phi;
    if !(a > 0.0 && b > 0.0) {
        return f64::NEG_INFINITY;
    }
    let base = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) - ln_gamma(n + a + b);
    k.iter()
        .map(|&ki| ln_gamma(ki + a) + ln_gamma(n - ki + b) + base)
        .sum()
}

pub fn fit_beta_binomial(spec: &BetaBinomSpec, cfg: &SamplerConfig, seed: u64) -> Result<Fit> {
    spec.validate()?;
    cfg.validate()?;
    let mut names: Vec<String> = spec.labels.iter().map(|l| param_name("mu", l)).collect();
    names.extend(["phi", "mu0", "tau"].map(String::from));
    let counts: Vec<Vec<f64>> = spec
        .k
        .outer_iter()
        .map(|row| row.iter().map(|v| *v as f64).collect())
        .collect();
    let chains = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = RngStream::new(seed, format!("bhm/betabinom/chain{c}"));
            run_chain(&counts, spec, cfg, c, &mut rng)
        })
        .collect();
    let samples = PosteriorSamples::new(names, chains)?;
    let diagnostics = compute_diagnostics(&samples);
    Ok(Fit {
        model: ModelKind::BetaBinomial,
        labels: spec.labels.clone(),
        samples,
        diagnostics,
        n_test: Some(spec.n_test),
    })
}

fn run_chain(
    counts: &[Vec<f64>],
    spec: &BetaBinomSpec,
    cfg: &SamplerConfig,
    chain: usize,
    rng: &mut RngStream,
) -> Array2<f64> {
    let m = counts.len();
    let n = spec.n_test as f64;
    let k = 1.0 + chain as f64 / 2.0;
    let target = cfg.target_accept;

    let mut mu0 = k * rng.normal();
    let mut log_tau = (k * half_normal_init(rng)).ln();
    let mut log_phi = (spec.phi_prior_scale * k * half_normal_init(rng)).ln();
    let mut logit: Vec<f64> = (0..m)
        .map(|_| mu0 + k * log_tau.exp() * rng.normal())
        .collect();

    let mut rw_mu: Vec<RwScale> = (0..m).map(|_| RwScale::new(0.1, target)).collect();
    let mut rw_phi = RwScale::new(0.2, target);
    let mut rw_tau = RwScale::new(0.5, target);
    let mut rw_scale = RwScale::new(0.3, target);
    let mut rw_shift = RwScale::new(0.05, target);

    let mut ll: Vec<f64> = (0..m)
        .map(|j| column_loglik(&counts[j], n, logit[j], log_phi.exp()))
        .collect();
    let mut out = Array2::zeros((cfg.draws(), m + 3));
    for it in 0..cfg.iterations {
        let adapting = it < cfg.warmup;
        for _ in 0..cfg.sweeps {
            let tau2 = (2.0 * log_tau).exp();
            let phi = log_phi.exp();

            for j in 0..m {
                let prior = |x: f64| -0.5 * (x - mu0).powi(2) / tau2;
                let f = |x: f64| column_loglik(&counts[j], n, x, phi) + prior(x);
                let mut cur = ll[j] + prior(logit[j]);
                for _ in 0..cfg.inner_steps {
                    (logit[j], cur) = rw_mu[j].update(logit[j], cur, f, rng, adapting);
                }
                ll[j] = cur - prior(logit[j]);
            }

            let scale = spec.phi_prior_scale;
            let f = |s: f64| {
                let p = s.exp();
                (0..m)
                    .map(|j| column_loglik(&counts[j], n, logit[j], p))
                    .sum::<f64>()
                    - 0.5 * (p / scale).powi(2)
                    + s
            };
            let mut cur = ll.iter().sum::<f64>() - 0.5 * (phi / scale).powi(2) + log_phi;
            let before = log_phi;
            for _ in 0..cfg.inner_steps {
                (log_phi, cur) = rw_phi.update(log_phi, cur, f, rng, adapting);
            }
            if log_phi != before {
                let p = log_phi.exp();
                for j in 0..m {
                    ll[j] = column_loglik(&counts[j], n, logit[j], p);
                }
            }

            let prec_0 = 1.0 + m as f64 / tau2;
            mu0 = (logit.iter().sum::<f64>() / tau2) / prec_0 + rng.normal() / prec_0.sqrt();

            let ss: f64 = logit.iter().map(|v| (v - mu0).powi(2)).sum();
            let f = |s: f64| {
                let v = (2.0 * s).exp();
                -(m as f64) * s - ss / (2.0 * v) - 0.5 * v + s
            };
            let mut cur = f(log_tau);
            for _ in 0..cfg.inner_steps {
                (log_tau, cur) = rw_tau.update(log_tau, cur, f, rng, adapting);
            }

            // Joint moves against the funnel at small tau: rescale the
            // deviations logit - mu0 together with tau (the hierarchical
            // prior term cancels the Jacobian), then shift mu0 and every
            // logit by a common offset.
            let phi = log_phi.exp();
            let total = |xs: &[f64]| -> Vec<f64> {
                (0..m)
                    .map(|j| column_loglik(&counts[j], n, xs[j], phi))
                    .collect()
            };
            let s0 = log_tau;
            let dev: Vec<f64> = logit.iter().map(|x| x - mu0).collect();
            let g = |s: f64| {
                let d = (s - s0).exp();
                let xs: Vec<f64> = dev.iter().map(|v| mu0 + d * v).collect();
                total(&xs).iter().sum::<f64>() - 0.5 * (2.0 * s).exp() + s
            };
            let cur = ll.iter().sum::<f64>() - 0.5 * (2.0 * s0).exp() + s0;
            let (s1, _) = rw_scale.update(s0, cur, g, rng, adapting);
            if s1 != s0 {
                let d = (s1 - s0).exp();
                for j in 0..m {
                    logit[j] = mu0 + d * dev[j];
                }
                log_tau = s1;
                ll = total(&logit);
            }

            let base = logit.clone();
            let m0 = mu0;
            let h = |c: f64| {
                let xs: Vec<f64> = base.iter().map(|x| x + c).collect();
                total(&xs).iter().sum::<f64>() - 0.5 * (m0 + c).powi(2)
            };
            let cur = ll.iter().sum::<f64>() - 0.5 * m0 * m0;
            let (c, _) = rw_shift.update(0.0, cur, h, rng, adapting);
            if c != 0.0 {
                mu0 += c;
                for x in logit.iter_mut() {
                    *x += c;
                }
                ll = total(&logit);
            }
        }
        if it >= cfg.warmup {
            let mut row = out.row_mut(it - cfg.warmup);
            for j in 0..m {
                row[j] = logistic(logit[j]);
            }
            row[m] = log_phi.exp();
            row[m + 1] = mu0;
            row[m + 2] = log_tau.exp();
        }
    }
    out
}
