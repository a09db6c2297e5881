//! Bayesian hierarchical comparison models, their MCMC samplers,
//! convergence diagnostics and posterior predictive checks.
//!
//! Downstream analysis only accepts a [`ConvergedPosterior`], which can be
//! obtained from a [`Fit`] only when its diagnostics pass.

mod betabinom;
mod closed_form;
mod diagnostics;
mod gaussian;
mod ppc;
mod samples;

use serde::{Deserialize, Serialize};

pub use betabinom::{fit_beta_binomial, BetaBinomSpec, PHI_PRIOR_SCALE};
pub use closed_form::{closed_form_posterior, closed_form_rank_prob, ClosedForm};
pub use diagnostics::{
    basic_rhat, bulk_ess, compute_diagnostics, ess, param_diagnostic, rank_normalize, rank_rhat,
    split_chains, Diagnostics, ParamDiagnostic, ESS_MIN, RHAT_MAX,
};
pub use gaussian::{fit_gaussian, FixedHyper, GaussianBhmSpec};
pub use ppc::{
    posterior_predictive_check, PpcSummary, SummaryStats, PPC_QUANTILES, PPC_REPLICATES, TAIL_Z,
};
pub use samples::PosteriorSamples;

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub chains: usize,
    /// Iterations per chain, warmup included.
    pub iterations: usize,
    pub warmup: usize,
    pub target_accept: f64,
    /// Random-walk updates per scalar parameter per iteration.
    pub inner_steps: usize,
    /// Full Gibbs sweeps per recorded iteration.
    pub sweeps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            iterations: 2000,
            warmup: 1000,
            target_accept: 0.44,
            inner_steps: 3,
            sweeps: 4,
        }
    }
}

impl SamplerConfig {
    pub fn draws(&self) -> usize {
        self.iterations.saturating_sub(self.warmup)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains < 2 || self.draws() < 4 || self.sweeps == 0 {
            return Err(Error::invalid(
                "sampler needs at least 2 chains and 4 post-warmup draws",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gaussian,
    BetaBinomial,
}

/// A finished sampler run, converged or not.
#[derive(Debug, Clone)]
pub struct Fit {
    pub model: ModelKind,
    pub labels: Vec<String>,
    pub samples: PosteriorSamples,
    pub diagnostics: Diagnostics,
    /// Binomial trials per observation (Beta-Binomial fits only).
    pub n_test: Option<u64>,
}

impl Fit {
    /// The posterior, if and only if it passes the diagnostics gate.
    pub fn converged(self) -> Result<ConvergedPosterior> {
        if self.diagnostics.passed {
            Ok(ConvergedPosterior(self))
        } else {
            Err(Error::Unconverged {
                max_rhat: self.diagnostics.max_rhat,
                min_ess: self.diagnostics.min_ess,
            })
        }
    }
}

/// A fit whose diagnostics passed. The only input type accepted by ranking
/// and detectability analyses.
#[derive(Debug, Clone)]
pub struct ConvergedPosterior(Fit);

impl ConvergedPosterior {
    pub fn fit(&self) -> &Fit {
        &self.0
    }

    pub fn labels(&self) -> &[String] {
        &self.0.labels
    }

    pub fn model(&self) -> ModelKind {
        self.0.model
    }

    /// Pooled draws of the latent mean for `label`, on the metric scale.
    pub fn mu_draws(&self, label: &str) -> Option<Vec<f64>> {
        self.0.samples.pooled(&format!("mu[{label}]"))
    }

    /// Pooled draws of the spread of a single new observation for `label`:
    /// `sigma_m` for the Gaussian model; for the Beta-Binomial model, the
    /// standard deviation of the covered fraction implied by `(mu_m, phi)`.
    pub fn scale_draws(&self, label: &str) -> Option<Vec<f64>> {
        match self.0.model {
            ModelKind::Gaussian => self.0.samples.pooled(&format!("sigma[{label}]")),
            ModelKind::BetaBinomial => {
                let mu = self.mu_draws(label)?;
                let phi = self.0.samples.pooled("phi")?;
                let n = self.0.n_test? as f64;
                Some(
                    mu.iter()
                        .zip(&phi)
                        .map(|(m, p)| (m * (1.0 - m) / n * (1.0 + (n - 1.0) / (p + 1.0))).sqrt())
                        .collect(),
                )
            }
        }
    }
}

pub(crate) fn param_name(kind: &str, label: &str) -> String {
    format!("{kind}[{label}]")
}

/// Random-walk Metropolis proposal scale, adapted in batches toward a
/// target acceptance rate during warmup.
#[derive(Debug, Clone)]
pub(crate) struct RwScale {
    log_step: f64,
    accepted: u32,
    tried: u32,
    batches: u32,
    target: f64,
}

const ADAPT_BATCH: u32 = 25;

impl RwScale {
    pub fn new(step: f64, target: f64) -> Self {
        Self {
            log_step: step.ln(),
            accepted: 0,
            tried: 0,
            batches: 0,
            target,
        }
    }

    /// One Metropolis update of scalar `x` under `log_target`.
    pub fn update<F: Fn(f64) -> f64>(
        &mut self,
        x: f64,
        current: f64,
        log_target: F,
        rng: &mut RngStream,
        adapting: bool,
    ) -> (f64, f64) {
        let prop = x + self.log_step.exp() * rng.normal();
        let lp = log_target(prop);
        let accept = lp.is_finite() && (lp - current >= 0.0 || rng.uniform().ln() < lp - current);
        if adapting {
            self.tried += 1;
            self.accepted += accept as u32;
            if self.tried == ADAPT_BATCH {
                self.batches += 1;
                let rate = self.accepted as f64 / self.tried as f64;
                let delta = (1.0 / (self.batches as f64).sqrt()).min(0.5);
                self.log_step += if rate > self.target { delta } else { -delta };
                self.tried = 0;
                self.accepted = 0;
            }
        }
        if accept {
            (prop, lp)
        } else {
            (x, current)
        }
    }
}

/// `|N(0,1)|` draw bounded away from zero, for overdispersed scale inits.
pub(crate) fn half_normal_init(rng: &mut RngStream) -> f64 {
    rng.normal().abs().max(0.1)
}
