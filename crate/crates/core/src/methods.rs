//! The six uncertainty-quantification trainers.
//!
//! Every trainer is a pure function of the training rows, the test inputs,
//! a seed and a [`MethodConfig`]. Randomness is drawn from labelled
//! [`RngStream`]s forked from the seed, so the same seed gives the same
//! initial network to MAP, CP and the first ensemble member.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datagen::DataView;
use crate::error::{Error, Result};
use crate::nn::{
    backward_with, clamp_variance, forward_with, nll_loss_and_grad, train_epochs, Dropout, Layout,
    Mlp, Optimizer, OptimizerConfig, VAR_MAX,
};
use crate::rng::{child_seed, RngStream};
use crate::scoring::{PredictiveDistribution, NOMINAL_LEVEL};
use crate::stats::Z_95;
use crate::types::MethodId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub test_samples: usize,
    pub dropout_rate: f64,
    pub ensemble_size: usize,
    pub bbb_epochs: usize,
    pub bbb_optimizer: OptimizerConfig,
    pub kl_weight: f64,
    /// Initial softplus pre-activation of the BBB weight scales.
    pub bbb_rho_init: f64,
    pub swag_optimizer: OptimizerConfig,
    pub swag_start_epoch: usize,
    pub cp_calibration_fraction: f64,
    pub cp_level: f64,
    pub hidden: usize,
    /// Apply the training variance clamp to test-time predictions too.
    /// Off by default: the clamp is a training stabilizer only.
    pub clamp_test_variance: bool,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            optimizer: OptimizerConfig::adam(),
            test_samples: 50,
            dropout_rate: 0.10,
            ensemble_size: 5,
            bbb_epochs: 1000,
            bbb_optimizer: OptimizerConfig::adam().with_weight_decay(0.0),
            kl_weight: 1e-3,
            bbb_rho_init: -5.0,
            swag_optimizer: OptimizerConfig::momentum_sgd(),
            swag_start_epoch: 300,
            cp_calibration_fraction: 0.20,
            cp_level: NOMINAL_LEVEL,
            hidden: 64,
            clamp_test_variance: false,
        }
    }
}

impl MethodConfig {
    fn layout(&self, input: usize) -> Layout {
        Layout::new(input, self.hidden, self.hidden)
    }
}

/// A trained method's predictive distribution plus its training trace.
#[derive(Debug, Clone)]
pub struct Trained {
    pub dist: PredictiveDistribution,
    pub loss_trace: Vec<f64>,
    /// SWAG only: number of weight snapshots collected.
    pub snapshots: Option<usize>,
}

pub fn train(
    method: MethodId,
    train: DataView<'_>,
    test_x: ArrayView2<f64>,
    seed: u64,
    cfg: &MethodConfig,
) -> Result<Trained> {
    if train.len() < 2 {
        return Err(Error::invalid(format!(
            "training set has {} rows, need at least 2",
            train.len()
        )));
    }
    let out = match method {
        MethodId::Map => train_map(train, test_x, seed, cfg),
        MethodId::Mcd => train_mcd(train, test_x, seed, cfg),
        MethodId::Ensemble => train_ensemble(train, test_x, seed, cfg),
        MethodId::Swag => train_swag(train, test_x, seed, cfg),
        MethodId::Bbb => train_bbb(train, test_x, seed, cfg),
        MethodId::Cp => train_cp(train, test_x, seed, cfg),
    }?;
    out.dist.validate()?;
    Ok(out)
}

fn fit_point_network(
    train: DataView<'_>,
    seed: u64,
    cfg: &MethodConfig,
    dropout: Option<f64>,
) -> Result<(Mlp, Vec<f64>)> {
    let root = RngStream::new(seed, "method");
    let mut init_rng = root.fork("init");
    let mut mlp = Mlp::init(cfg.layout(train.x.ncols()), &mut init_rng);
    let mut opt = Optimizer::new(cfg.optimizer, mlp.params().len(), cfg.epochs);
    let mut drop_rng = root.fork("dropout");
    let trace = train_epochs(
        &mut mlp,
        train,
        &mut opt,
        cfg.epochs,
        dropout,
        &mut drop_rng,
        |_, _| {},
    )?;
    Ok((mlp, trace))
}

/// Smallest test-time scale; keeps an unclamped collapsed variance positive.
pub const SIGMA_TINY: f64 = 1e-150;

/// Per-point mean and scale from raw network outputs.
fn gaussian_from(out: &Array2<f64>, cfg: &MethodConfig) -> (Vec<f64>, Vec<f64>) {
    let mu = out.column(0).to_vec();
    let sigma = out
        .column(1)
        .iter()
        .map(|&s| {
            if cfg.clamp_test_variance {
                clamp_variance(s).0.sqrt()
            } else {
                (0.5 * s).exp().clamp(SIGMA_TINY, VAR_MAX.sqrt())
            }
        })
        .collect();
    (mu, sigma)
}

fn predict_gaussian(
    mlp: &Mlp,
    x: ArrayView2<f64>,
    dropout: Option<Dropout<'_>>,
    cfg: &MethodConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok(gaussian_from(&mlp.forward_cached(x, dropout)?.out, cfg))
}

/// Transpose per-pass predictions into per-test-point component lists.
fn mixture_from(passes: Vec<(Vec<f64>, Vec<f64>)>, n_test: usize) -> PredictiveDistribution {
    let k = passes.len();
    let mut mu = vec![Vec::with_capacity(k); n_test];
    let mut sigma = vec![Vec::with_capacity(k); n_test];
    for (m, s) in passes {
        for i in 0..n_test {
            mu[i].push(m[i]);
            sigma[i].push(s[i]);
        }
    }
    PredictiveDistribution::Mixture { mu, sigma }
}

pub fn train_map(
    train: DataView<'_>,
    test_x: ArrayView2<f64>,
    seed: u64,
    cfg: &MethodConfig,
) -> Result<Trained> {
    let (mlp, loss_trace) = fit_point_network(train, seed, cfg, None)?;
    let (mu, sigma) = predict_gaussian(&mlp, test_x, None, cfg)?;
    Ok(Trained {
        dist: PredictiveDistribution::Gaussian { mu, sigma },
        loss_trace,
        snapshots: None,
    })
}

pub fn train_mcd(
    train: DataView<'_>,
    test_x: ArrayView2<f64>,
    seed: u64,
    cfg: &MethodConfig,
) -> Result<Trained> {
    if !(cfg.dropout_rate > 0.0 && cfg.dropout_rate < 1.0) {
        return Err(Error::invalid(format!(
            "dropout rate {} outside (0, 1)",
            cfg.dropout_rate
        )));
    }
    let (mlp, loss_trace) = fit_point_network(train, seed, cfg, Some(cfg.dropout_rate))?;
    let mut rng = RngStream::new(seed, "method").fork("mc_passes");
    let passes = (0..cfg.test_samples)
        .map(|_| {
            let d = Dropout {
                rate: cfg.dropout_rate,
                rng: &mut rng,
            };
            predict_gaussian(&mlp, test_x, Some(d), cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trained {
        dist: mixture_from(passes, test_x.nrows()),
        loss_trace,
        snapshots: None,
    })
}

/// Seed of ensemble member `k`; member 0 reuses the cell seed.
pub fn member_seed(seed: u64, k: usize) -> u64 {
    if k == 0 {
        seed
    } else {
        child_seed(seed, k as u64)
    }
}

pub fn train_ensemble(
    train: DataView<'_>,
    test_x: ArrayView2<f64>,
    seed: u64,
    cfg: &MethodConfig,
) -> Result<Trained> {
    if cfg.ensemble_size == 0 {
        return Err(Error::invalid("ensemble size must be positive"));
    }
    let mut passes = Vec::with_capacity(cfg.ensemble_size);
    let mut loss_trace = vec![0.0; cfg.epochs];
    for k in 0..cfg.ensemble_size {
        let (mlp, trace) = fit_point_network(train, member_seed(seed, k), cfg, None)?;
        for (acc, l) in loss_trace.iter_mut().zip(&trace) {
            *acc += l / cfg.ensemble_size as f64;
        }
        passes.push(predict_gaussian(&mlp, test_x, None, cfg)?);
    }
    Ok(Trained {
        dist: mixture_from(passes, test_x.nrows()),
        loss_trace,
        snapshots: None,
    })
}

/// Running first and second moments of flattened weights (Welford).
#[derive(Debug, Clone)]
pub struct SwagMoments {
    count: usize,
    mean: Array1<f64>,
    m2: Array1<f64>,
}

impl SwagMoments {
    pub fn new(n_params: usize) -> Self {
        Self {
            count: 0,
            mean: Array1::zeros(n_params),
            m2: Array1::zeros(n_params),
        }
    }

    pub fn push(&mut self, theta: &Array1<f64>) {
        self.count += 1;
        let k = self.count as f64;
        ndarray::Zip::from(&mut self.mean)
            .and(&mut self.m2)
            .and(theta)
            .for_each(|m, s, &x| {
                let d = x - *m;
                *m += d / k;
                *s += d * (x - *m);
            });
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    /// Population variance of each weight over the snapshots.
    pub fn variance(&self) -> Array1<f64> {
        let k = self.count.max(1) as f64;
        self.m2.mapv(|s| (s / k).max(0.0))
    }
}

pub fn train_swag(
    train: DataView<'_>,
    test_x: ArrayView2<f64>,
    seed: u64,
    cfg: &MethodConfig,
) -> Result<Trained> {
    let root = RngStream::new(seed, "method");
    let mut init_rng = root.fork("init");
    let mut mlp = Mlp::init(cfg.layout(train.x.ncols()), &mut init_rng);
    let mut opt = Optimizer::new(cfg.swag_optimizer, mlp.params().len(), cfg.epochs);
    let mut moments = SwagMoments::new(mlp.params().len());
    let mut unused = root.fork("unused");
    let start = cfg.swag_start_epoch;
    let loss_trace = train_epochs(
        &mut mlp,
        train,
        &mut opt,
        cfg.epochs,
        None,
        &mut unused,
        |epoch, m| {
            if epoch >= start {
                moments.push(m.params());
            }
        },
    )?;
    if moments.count() < 2 {
        return Err(Error::TooFewSnapshots {
            snapshots: moments.count(),
        });
    }
    if !moments.mean().iter().all(|v| v.is_finite()) {
        return Err(Error::ConvergenceFailure { epoch: cfg.epochs });
    }
    let sd = moments.variance().mapv(f64::sqrt);
    let layout = mlp.layout();
    let mut rng = root.fork("posterior");
    let passes = (0..cfg.test_samples)
        .map(|_| {
            let theta =
                moments.mean() + &(&sd * &Array1::from_shape_simple_fn(sd.len(), || rng.normal()));
            let net = Mlp::from_params(layout, theta)?;
            let (mu, sigma) = predict_gaussian(&net, test_x, None, cfg)?;
            if !mu.iter().chain(&sigma).all(|v| v.is_finite()) {
                return Err(Error::ConvergenceFailure { epoch: cfg.epochs });
            }
            Ok((mu, sigma))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trained {
        dist: mixture_from(passes, test_x.nrows()),
        loss_trace,
        snapshots: Some(moments.count()),
    })
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// KL(N(mu, sigma^2) || N(0, 1)).
#[inline]
pub fn kl_to_standard_normal(mu: f64, sigma: f64) -> f64 {
    -sigma.ln() + 0.5 * (sigma * sigma + mu * mu) - 0.5
}

/// Mean-field Gaussian posterior over the flat weight vector.
#[derive(Debug, Clone)]
pub struct BbbPosterior {
    pub layout: Layout,
    pub mean: Array1<f64>,
    pub rho: Array1<f64>,
}

impl BbbPosterior {
    pub fn sigma(&self) -> Array1<f64> {
        self.rho.mapv(softplus)
    }

    /// Total KL to the N(0, 1) prior summed over weights.
    pub fn kl(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.rho)
            .map(|(m, r)| kl_to_standard_normal(*m, softplus(*r)))
            .sum()
    }

    pub fn sample(&self, rng: &mut RngStream) -> Array1<f64> {
        let eps = Array1::from_shape_simple_fn(self.mean.len(), || rng.normal());
        &self.mean + &(self.sigma() * eps)
    }
}

/// Optimize the BBB ELBO. Returns the posterior and the per-epoch loss
/// `mean NLL + kl_weight * KL`.
pub fn fit_bbb(
    train: DataView<'_>,
    seed: u64,
    cfg: &MethodConfig,
) -> Result<(BbbPosterior, Vec<f64>)> {
    if !(cfg.kl_weight > 0.0) {
        return Err(Error::invalid(format!(
            "KL weight {} must be positive",
            cfg.kl_weight
        )));
    }
    let root = RngStream::new(seed, "method");
    let mut init_rng = root.fork("init");
    let layout = cfg.layout(train.x.ncols());
    let init = Mlp::init(layout, &mut init_rng);
    let p = layout.n_params();
    let mut post = BbbPosterior {
        layout,
        mean: init.params().clone(),
        rho: Array1::from_elem(p, cfg.bbb_rho_init),
    };
    let mut opt = Optimizer::new(cfg.bbb_optimizer, 2 * p, cfg.bbb_epochs);
    let mut rng = root.fork("elbo");
    let mut packed = Array1::zeros(2 * p);
    let mut grad = Array1::zeros(2 * p);
    let mut trace = Vec::with_capacity(cfg.bbb_epochs);
    for epoch in 0..cfg.bbb_epochs {
        let eps = Array1::from_shape_simple_fn(p, || rng.normal());
        let sigma = post.sigma();
        let w = &post.mean + &(&sigma * &eps);
        let cache = forward_with(
            &layout,
            w.as_slice().expect("contiguous"),
            train.x.view(),
            None,
        )?;
        let (nll, dout) = nll_loss_and_grad(&cache.out, train.y);
        let kl = post.kl();
        let loss = nll + cfg.kl_weight * kl;
        if !loss.is_finite() {
            return Err(Error::ConvergenceFailure { epoch });
        }
        trace.push(loss);
        let gw = backward_with(
            &layout,
            w.as_slice().expect("contiguous"),
            train.x.view(),
            &cache,
            &dout,
        );
        for j in 0..p {
            let (m, s, r) = (post.mean[j], sigma[j], post.rho[j]);
            grad[j] = gw[j] + cfg.kl_weight * m;
            let dsigma = gw[j] * eps[j] + cfg.kl_weight * (s - 1.0 / s);
            grad[p + j] = dsigma * sigmoid(r);
            packed[j] = m;
            packed[p + j] = r;
        }
        opt.step(&mut packed, &grad, epoch);
        post.mean.assign(&packed.slice(ndarray::s![..p]));
        post.rho.assign(&packed.slice(ndarray::s![p..]));
    }
    Ok((post, trace))
}

pub fn train_bbb(
    train: DataView<'_>,
    test_x: ArrayView2<f64>,
    seed: u64,
    cfg: &MethodConfig,
) -> Result<Trained> {
    let (post, loss_trace) = fit_bbb(train, seed, cfg)?;
    let mut rng = RngStream::new(seed, "method").fork("posterior");
    let passes = (0..cfg.test_samples)
        .map(|_| {
            let w = post.sample(&mut rng);
            let cache = forward_with(
                &post.layout,
                w.as_slice().expect("contiguous"),
                test_x,
                None,
            )?;
            Ok(gaussian_from(&cache.out, cfg))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trained {
        dist: mixture_from(passes, test_x.nrows()),
        loss_trace,
        snapshots: None,
    })
}

/// 1-based order statistic used as the conformal half-width:
/// `ceil(level * (n_cal + 1))`, capped at `n_cal`.
pub fn conformal_rank(n_cal: usize, level: f64) -> usize {
    let k = (level * (n_cal as f64 + 1.0) - 1e-9).ceil() as usize;
    k.clamp(1, n_cal)
}

/// Calibration set size for a training set of `n` rows.
pub fn calibration_size(n: usize, fraction: f64) -> usize {
    ((n as f64) * fraction).round() as usize
}

/// Conformal half-width from calibration scores.
pub fn conformal_quantile(scores: &[f64], level: f64) -> Result<f64> {
    if scores.len() < 2 {
        return Err(Error::invalid(format!(
            "calibration split has {} points, need at least 2",
            scores.len()
        )));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s[conformal_rank(s.len(), level) - 1])
}

pub fn train_cp(
    train: DataView<'_>,
    test_x: ArrayView2<f64>,
    seed: u64,
    cfg: &MethodConfig,
) -> Result<Trained> {
    let n = train.len();
    let n_cal = calibration_size(n, cfg.cp_calibration_fraction);
    if n_cal < 2 || n_cal >= n {
        return Err(Error::invalid(format!(
            "calibration split of {n_cal} from {n} rows is unusable"
        )));
    }
    let mut split_rng = RngStream::new(seed, "method").fork("cp_split");
    let perm = rand::seq::index::sample(split_rng.rng_mut(), n, n).into_vec();
    let (cal_idx, fit_idx) = perm.split_at(n_cal);
    let pick = |idx: &[usize]| -> (Array2<f64>, Array1<f64>) {
        (
            train.x.select(ndarray::Axis(0), idx),
            idx.iter().map(|&i| train.y[i]).collect(),
        )
    };
    let (fx, fy) = pick(fit_idx);
    let (cx, cy) = pick(cal_idx);
    let (mlp, loss_trace) = fit_point_network(DataView::new(&fx, &fy), seed, cfg, None)?;
    let (cal_mu, _) = mlp.predict(cx.view(), None)?;
    let scores: Vec<f64> = cal_mu.iter().zip(&cy).map(|(m, y)| (y - m).abs()).collect();
    let q = conformal_quantile(&scores, cfg.cp_level)?;
    let (mu, _) = mlp.predict(test_x, None)?;
    let z = if (cfg.cp_level - NOMINAL_LEVEL).abs() < 1e-12 {
        Z_95
    } else {
        crate::stats::norm_quantile(0.5 + 0.5 * cfg.cp_level)
    };
    let sigma = (q > 0.0).then(|| vec![q / z; mu.len()]);
    Ok(Trained {
        dist: PredictiveDistribution::Interval {
            lower: mu.iter().map(|m| m - q).collect(),
            upper: mu.iter().map(|m| m + q).collect(),
            level: cfg.cp_level,
            mu: mu.to_vec(),
            sigma,
        },
        loss_trace,
        snapshots: None,
    })
}

/// Write one JSON object per test point: its index and the distribution
/// parameters at that point.
pub fn write_distribution_jsonl<W: Write>(dist: &PredictiveDistribution, mut w: W) -> Result<()> {
    for i in 0..dist.test_size() {
        let row = match dist {
            PredictiveDistribution::Gaussian { mu, sigma } => {
                serde_json::json!({"index": i, "kind": "gaussian", "mu": mu[i], "sigma": sigma[i]})
            }
            PredictiveDistribution::Mixture { mu, sigma } => {
                serde_json::json!({"index": i, "kind": "mixture", "mu": mu[i], "sigma": sigma[i]})
            }
            PredictiveDistribution::Interval {
                lower,
                upper,
                level,
                mu,
                sigma,
            } => serde_json::json!({
                "index": i,
                "kind": "interval",
                "lower": lower[i],
                "upper": upper[i],
                "level": level,
                "mu": mu[i],
                "sigma": sigma.as_ref().map(|s| s[i]),
            }),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}
