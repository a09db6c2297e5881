use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uqbench_core::datagen::{DEFAULT_MAX_POOL_FRACTION, DEFAULT_TEST_FRACTION, STANDARD_N_LEVELS};
use uqbench_core::hier::SamplerConfig;
use uqbench_core::methods::MethodConfig;
use uqbench_core::{MethodId, MetricId, SeedMode};

pub const QUICK_REALIZATIONS: usize = 10;
pub const QUICK_N_LEVELS: [usize; 2] = [30, 100];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic,
    Csv {
        path: PathBuf,
        target: String,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    DEFAULT_TEST_FRACTION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub n_levels: Vec<usize>,
    pub realizations: usize,
    pub methods: Vec<MethodId>,
    pub metrics: Vec<MetricId>,
    pub method_config: MethodConfig,
    pub sampler: SamplerConfig,
    pub global_seed: u64,
    pub seed_mode: SeedMode,
    /// Power level for MDD curves.
    pub gamma: f64,
    pub max_pool_fraction: f64,
    /// Drop methods converging in under 80% of realizations from BHM fits.
    pub exclude_unconverged: bool,
    /// Scale of the half-normal prior on the Beta-Binomial precision.
    pub phi_prior_scale: f64,
    /// Method pair for the headline comparison and MDD curve.
    pub focus: (MethodId, MethodId),
    pub quick: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Synthetic,
            n_levels: STANDARD_N_LEVELS.to_vec(),
            realizations: 50,
            methods: MethodId::ALL.to_vec(),
            metrics: MetricId::ALL.to_vec(),
            method_config: MethodConfig::default(),
            sampler: SamplerConfig::default(),
            global_seed: 42,
            seed_mode: SeedMode::default(),
            gamma: 0.80,
            max_pool_fraction: DEFAULT_MAX_POOL_FRACTION,
            exclude_unconverged: true,
            phi_prior_scale: 100.0,
            focus: (MethodId::Mcd, MethodId::Ensemble),
            quick: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Quick mode shrinks the grid to R=10 and n in {30, 100}.
    pub fn quick(mut self) -> Self {
        self.quick = true;
        self.realizations = QUICK_REALIZATIONS;
        self.n_levels = QUICK_N_LEVELS.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_levels.is_empty() || self.n_levels.iter().any(|&n| n < 2) {
            bail!("n_levels must be non-empty with every level >= 2");
        }
        let mut sorted = self.n_levels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.n_levels.len() {
            bail!("n_levels contains duplicates");
        }
        if self.realizations < 2 {
            bail!("need at least 2 realizations, got {}", self.realizations);
        }
        if self.methods.len() < 2 {
            bail!("need at least 2 methods");
        }
        if self.metrics.is_empty() {
            bail!("metric roster is empty");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            bail!("gamma must lie in (0, 1), got {}", self.gamma);
        }
        if !(self.max_pool_fraction > 0.0 && self.max_pool_fraction <= 1.0) {
            bail!("max_pool_fraction must lie in (0, 1]");
        }
        if !(self.phi_prior_scale > 0.0) {
            bail!("phi_prior_scale must be positive");
        }
        if self.focus.0 == self.focus.1 {
            bail!("focus pair must name two different methods");
        }
        if let DatasetSpec::Csv { test_fraction, .. } = &self.dataset {
            if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                bail!("test_fraction must lie in (0, 1)");
            }
        }
        self.sampler.validate()?;
        Ok(())
    }

    /// Sorted n levels.
    pub fn levels(&self) -> Vec<usize> {
        let mut v = self.n_levels.clone();
        v.sort_unstable();
        v
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Content hash of the canonical JSON form; names the run directory.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(&self.to_json()).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_mode_shrinks_the_grid() {
        let c = ExperimentConfig::default().quick();
        assert_eq!(c.realizations, 10);
        assert_eq!(c.n_levels, vec![30, 100]);
        c.validate().unwrap();
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.global_seed = 7;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn json_round_trip_and_partial_files() {
        let a = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_value(a.to_json()).unwrap();
        assert_eq!(a, back);
        let partial: ExperimentConfig =
            serde_json::from_str(r#"{"realizations": 5, "method_config": {"epochs": 10}}"#)
                .unwrap();
        assert_eq!(partial.realizations, 5);
        assert_eq!(partial.method_config.epochs, 10);
        assert_eq!(partial.global_seed, 42);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            ExperimentConfig {
                realizations: 1,
                ..Default::default()
            },
            ExperimentConfig {
                gamma: 1.0,
                ..Default::default()
            },
            ExperimentConfig {
                n_levels: vec![30, 30],
                ..Default::default()
            },
            ExperimentConfig {
                focus: (MethodId::Map, MethodId::Map),
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
