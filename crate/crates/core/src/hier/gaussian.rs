//! Gaussian hierarchical model with method-specific noise and a
//! realization intercept:
//!
//! ```text
//! y[m,i] ~ N(mu[m] + gamma[i], sigma[m]^2)
//! gamma[i] ~ N(0, sigma_gamma^2)      mu[m] ~ N(mu0, tau^2)
//! mu0 ~ N(0, 1)   tau, sigma[m], sigma_gamma ~ HalfNormal(1)
//! ```
//!
//! Metropolis-within-Gibbs. The noise and intercept scales take
//! random-walk steps on their marginal with `gamma` integrated out, followed
//! by a conjugate draw of `gamma`; `tau` likewise with `mu` integrated out.
//! An exact draw along `(mu + c, mu0 + c, gamma - c)`, which the likelihood
//! cannot see, removes the location ridge.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    compute_diagnostics, half_normal_init, param_name, Fit, ModelKind, PosteriorSamples, RwScale,
    SamplerConfig,
};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Known hyperparameters: the realization intercept is switched off and
/// only the method means are sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedHyper {
    pub sigma: Vec<f64>,
    pub tau: f64,
    pub mu0: f64,
}

#[derive(Debug, Clone)]
pub struct GaussianBhmSpec {
    pub labels: Vec<String>,
    /// Methods x realizations.
    pub y: Array2<f64>,
    /// Center and scale observations by their grand mean and SD before
    /// fitting; draws are mapped back to the metric scale.
    pub standardize: bool,
    pub fixed: Option<FixedHyper>,
}

impl GaussianBhmSpec {
    pub fn new(labels: Vec<String>, y: Array2<f64>) -> Self {
        Self {
            labels,
            y,
            standardize: true,
            fixed: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let (m, r) = self.y.dim();
        if m < 2 || r < 2 {
            return Err(Error::invalid(format!(
                "hierarchical fit needs at least 2 methods and 2 realizations, got {m} x {r}"
            )));
        }
        if self.labels.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: self.labels.len(),
            });
        }
        if !self.y.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite metric value in BHM input"));
        }
        if let Some(f) = &self.fixed {
            if f.sigma.len() != m || !f.sigma.iter().all(|s| *s > 0.0) || !(f.tau > 0.0) {
                return Err(Error::invalid(
                    "fixed hyperparameters must be positive, one sigma per method",
                ));
            }
        }
        Ok(())
    }
}

struct Scaling {
    center: f64,
    scale: f64,
}

impl Scaling {
    fn of(y: ArrayView2<f64>, on: bool) -> Self {
        if !on {
            return Self {
                center: 0.0,
                scale: 1.0,
            };
        }
        let n = y.len() as f64;
        let center = y.sum() / n;
        let var = y.iter().map(|v| (v - center).powi(2)).sum::<f64>() / (n - 1.0);
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self { center, scale }
    }
}

pub fn fit_gaussian(spec: &GaussianBhmSpec, cfg: &SamplerConfig, seed: u64) -> Result<Fit> {
    spec.validate()?;
    cfg.validate()?;
    let fixed = spec.fixed.is_some();
    let sc = Scaling::of(spec.y.view(), spec.standardize && !fixed);
    let z = spec.y.mapv(|v| (v - sc.center) / sc.scale);
    let (m, r) = z.dim();

    let mut names: Vec<String> = spec.labels.iter().map(|l| param_name("mu", l)).collect();
    if !fixed {
        names.extend(spec.labels.iter().map(|l| param_name("sigma", l)));
        names.extend((0..r).map(|i| format!("gamma[{i}]")));
        names.extend(["sigma_gamma", "mu0", "tau"].map(String::from));
    }

    let chains = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = RngStream::new(seed, format!("bhm/gaussian/chain{c}"));
            let draws = match &spec.fixed {
                Some(f) => run_fixed(&z, f, cfg, &mut rng),
                None => run_chain(&z, cfg, c, &mut rng),
            };
            let mut out = draws;
            // back to the metric scale
            for mut row in out.outer_iter_mut() {
                for j in 0..m {
                    row[j] = sc.center + sc.scale * row[j];
                }
                if !fixed {
                    for j in m..(2 * m + r + 1) {
                        row[j] *= sc.scale;
                    }
                    row[2 * m + r + 1] = sc.center + sc.scale * row[2 * m + r + 1];
                    row[2 * m + r + 2] *= sc.scale;
                }
            }
            out
        })
        .collect();
    let samples = PosteriorSamples::new(names, chains)?;
    let diagnostics = compute_diagnostics(&samples);
    Ok(Fit {
        model: ModelKind::Gaussian,
        labels: spec.labels.clone(),
        samples,
        diagnostics,
        n_test: None,
    })
}

fn run_fixed(
    z: &Array2<f64>,
    f: &FixedHyper,
    cfg: &SamplerConfig,
    rng: &mut RngStream,
) -> Array2<f64> {
    let (m, r) = z.dim();
    let mut out = Array2::zeros((cfg.draws(), m));
    for it in 0..cfg.iterations {
        for j in 0..m {
            let s2 = f.sigma[j] * f.sigma[j];
            let prec = r as f64 / s2 + 1.0 / (f.tau * f.tau);
            let mean = (z.row(j).sum() / s2 + f.mu0 / (f.tau * f.tau)) / prec;
            let draw = mean + rng.normal() / prec.sqrt();
            if it >= cfg.warmup {
                out[[it - cfg.warmup, j]] = draw;
            }
        }
    }
    out
}

fn run_chain(
    z: &Array2<f64>,
    cfg: &SamplerConfig,
    chain: usize,
    rng: &mut RngStream,
) -> Array2<f64> {
    let (m, r) = z.dim();
    let (mf, rf) = (m as f64, r as f64);
    let k = 1.0 + chain as f64 / 2.0;

    // overdispersed prior draws
    let mut mu0 = k * rng.normal();
    let mut log_tau = (k * half_normal_init(rng)).ln();
    let mut log_sg = (k * half_normal_init(rng)).ln();
    let mut log_sigma: Vec<f64> = (0..m).map(|_| (k * half_normal_init(rng)).ln()).collect();
    let mut mu: Vec<f64> = (0..m)
        .map(|_| mu0 + k * log_tau.exp() * rng.normal())
        .collect();
    let mut gamma: Vec<f64> = (0..r).map(|_| k * log_sg.exp() * rng.normal()).collect();

    let target = cfg.target_accept;
    let mut rw_sigma: Vec<RwScale> = (0..m).map(|_| RwScale::new(0.2, target)).collect();
    let mut rw_sg = RwScale::new(0.2, target);
    let mut rw_tau = RwScale::new(0.5, target);

    let width = 2 * m + r + 3;
    let mut out = Array2::zeros((cfg.draws(), width));
    for it in 0..cfg.iterations {
        let adapting = it < cfg.warmup;
        for _ in 0..cfg.sweeps {
            // (sigma, sigma_gamma, gamma) as a block: random-walk updates of
            // the scales on the marginal with gamma integrated out, then
            // gamma from its conditional
            let d: Vec<Vec<f64>> = (0..m)
                .map(|j| (0..r).map(|i| z[[j, i]] - mu[j]).collect())
                .collect();
            let v_g = (2.0 * log_sg).exp();
            for j in 0..m {
                let mut t_rest = vec![0.0; r];
                let mut s_rest = 0.0;
                for k in (0..m).filter(|&k| k != j) {
                    let iv = (-2.0 * log_sigma[k]).exp();
                    s_rest += iv;
                    for i in 0..r {
                        t_rest[i] += d[k][i] * iv;
                    }
                }
                let a0: f64 = t_rest.iter().map(|t| t * t).sum();
                let a1: f64 = t_rest.iter().zip(&d[j]).map(|(t, x)| t * x).sum();
                let a2: f64 = d[j].iter().map(|x| x * x).sum();
                let f = |s: f64| {
                    let iv = (-2.0 * s).exp();
                    let den = 1.0 + v_g * (s_rest + iv);
                    let t2 = a0 + 2.0 * iv * a1 + iv * iv * a2;
                    -rf * s - 0.5 * iv * a2 - 0.5 * rf * den.ln() + 0.5 * v_g * t2 / den - 0.5 / iv
                        + s
                };
                let mut cur = f(log_sigma[j]);
                for _ in 0..cfg.inner_steps {
                    (log_sigma[j], cur) = rw_sigma[j].update(log_sigma[j], cur, f, rng, adapting);
                }
            }
            let inv_var: Vec<f64> = log_sigma.iter().map(|s| (-2.0 * s).exp()).collect();
            let s_iv: f64 = inv_var.iter().sum();
            let t: Vec<f64> = (0..r)
                .map(|i| (0..m).map(|j| d[j][i] * inv_var[j]).sum())
                .collect();
            let t2: f64 = t.iter().map(|v| v * v).sum();
            let f = |s: f64| {
                let v = (2.0 * s).exp();
                let den = 1.0 + v * s_iv;
                -0.5 * rf * den.ln() + 0.5 * v * t2 / den - 0.5 * v + s
            };
            let mut cur = f(log_sg);
            for _ in 0..cfg.inner_steps {
                (log_sg, cur) = rw_sg.update(log_sg, cur, f, rng, adapting);
            }
            let sg2 = (2.0 * log_sg).exp();
            let prec_g = s_iv + 1.0 / sg2;
            for (g, ti) in gamma.iter_mut().zip(&t) {
                *g = ti / prec_g + rng.normal() / prec_g.sqrt();
            }

            // shift (mu + c, mu0 + c, gamma - c): the likelihood is invariant
            let prec_c = 1.0 + rf / sg2;
            let mean_c = (-mu0 + gamma.iter().sum::<f64>() / sg2) / prec_c;
            let c = mean_c + rng.normal() / prec_c.sqrt();
            mu0 += c;
            gamma.iter_mut().for_each(|v| *v -= c);

            // (tau, mu) as a block, mu integrated out of the tau update
            let m_hat: Vec<f64> = (0..m)
                .map(|j| (0..r).map(|i| z[[j, i]] - gamma[i]).sum::<f64>() / rf)
                .collect();
            let w: Vec<f64> = inv_var.iter().map(|iv| 1.0 / (rf * iv)).collect();
            let f = |s: f64| {
                let v = (2.0 * s).exp();
                -(0..m)
                    .map(|j| 0.5 * (v + w[j]).ln() + 0.5 * (m_hat[j] - mu0).powi(2) / (v + w[j]))
                    .sum::<f64>()
                    - 0.5 * v
                    + s
            };
            let mut cur = f(log_tau);
            for _ in 0..cfg.inner_steps {
                (log_tau, cur) = rw_tau.update(log_tau, cur, f, rng, adapting);
            }
            let tau2 = (2.0 * log_tau).exp();
            for j in 0..m {
                let prec = 1.0 / w[j] + 1.0 / tau2;
                let mean = (m_hat[j] / w[j] + mu0 / tau2) / prec;
                mu[j] = mean + rng.normal() / prec.sqrt();
            }

            let prec_0 = 1.0 + mf / tau2;
            mu0 = (mu.iter().sum::<f64>() / tau2) / prec_0 + rng.normal() / prec_0.sqrt();
        }
        if it >= cfg.warmup {
            let mut row = out.row_mut(it - cfg.warmup);
            for j in 0..m {
                row[j] = mu[j];
                row[m + j] = log_sigma[j].exp();
            }
            for i in 0..r {
                row[2 * m + i] = gamma[i];
            }
            row[2 * m + r] = log_sg.exp();
            row[2 * m + r + 1] = mu0;
            row[2 * m + r + 2] = log_tau.exp();
        }
    }
    out
}
