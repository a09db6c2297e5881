//! Two-hidden-layer heteroscedastic MLP with hand-written backpropagation.
//!
//! Parameters live in one flat vector so optimizers, weight averaging and
//! variational posteriors can treat them uniformly. The network maps
//! `d -> h1 -> h2 -> 2`; the outputs are the predictive mean and the raw
//! log variance.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::datagen::DataView;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::stats::LN_SQRT_2PI;

pub const VAR_MIN: f64 = 1e-3;
pub const VAR_MAX: f64 = 1e3;
/// `ln(f32::MAX)`. A raw log variance above this overflows `exp` in single
/// precision, where the clamp's zero gradient times an infinite `exp`
/// derivative is NaN. Training reports it as a non-finite loss so failure
/// detection matches single-precision frameworks.
pub const LOG_VAR_OVERFLOW: f64 = 88.722_839_111_672_99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
}

impl Layout {
    pub const OUTPUT: usize = 2;

    pub fn new(input: usize, hidden1: usize, hidden2: usize) -> Self {
        Self {
            input,
            hidden1,
            hidden2,
        }
    }

    /// The benchmark architecture: 64 units in both hidden layers.
    pub fn standard(input: usize) -> Self {
        Self::new(input, 64, 64)
    }

    pub fn n_params(&self) -> usize {
        self.offsets()[6]
    }

    // [w1, b1, w2, b2, w3, b3, end]
    fn offsets(&self) -> [usize; 7] {
        let (d, h1, h2, o) = (self.input, self.hidden1, self.hidden2, Self::OUTPUT);
        let mut off = [0; 7];
        let sizes = [d * h1, h1, h1 * h2, h2, h2 * o, o];
        for i in 0..6 {
            off[i + 1] = off[i] + sizes[i];
        }
        off
    }
}

/// Borrowed per-layer views into a flat parameter vector.
struct Layers<'a> {
    w1: ArrayView2<'a, f64>,
    b1: ArrayView1<'a, f64>,
    w2: ArrayView2<'a, f64>,
    b2: ArrayView1<'a, f64>,
    w3: ArrayView2<'a, f64>,
    b3: ArrayView1<'a, f64>,
}

impl<'a> Layers<'a> {
    fn new(layout: &Layout, flat: &'a [f64]) -> Self {
        let o = layout.offsets();
        let (d, h1, h2) = (layout.input, layout.hidden1, layout.hidden2);
        let view2 = |a: usize, b: usize, r: usize, c: usize| {
            ArrayView2::from_shape((r, c), &flat[o[a]..o[b]]).expect("layout shape")
        };
        Layers {
            w1: view2(0, 1, d, h1),
            b1: ArrayView1::from(&flat[o[1]..o[2]]),
            w2: view2(2, 3, h1, h2),
            b2: ArrayView1::from(&flat[o[3]..o[4]]),
            w3: view2(4, 5, h2, Layout::OUTPUT),
            b3: ArrayView1::from(&flat[o[5]..o[6]]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layout: Layout,
    params: Array1<f64>,
}

/// Per-unit dropout applied after each hidden ReLU.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut RngStream,
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    z1: Array2<f64>,
    a1: Array2<f64>,
    mask1: Option<Array2<f64>>,
    z2: Array2<f64>,
    a2: Array2<f64>,
    mask2: Option<Array2<f64>>,
    /// Raw network outputs (mean, unclamped log variance), n x 2.
    pub out: Array2<f64>,
}

/// Clamp variance to [VAR_MIN, VAR_MAX] after exponentiation. Returns the
/// clamped variance and whether the clamp was active.
#[inline]
pub fn clamp_variance(raw_log_var: f64) -> (f64, bool) {
    let v = raw_log_var.exp();
    if v < VAR_MIN {
        (VAR_MIN, true)
    } else if v > VAR_MAX {
        (VAR_MAX, true)
    } else {
        (v, false)
    }
}

/// Gaussian negative log-likelihood, `0.5 (log s2 + (y - mu)^2 / s2) + 0.5 log 2 pi`.
#[inline]
pub fn gaussian_nll(mu: f64, log_var: f64, y: f64) -> f64 {
    let r = y - mu;
    0.5 * (log_var + r * r * (-log_var).exp()) + LN_SQRT_2PI
}

/// Mean clamped NLL over a batch and its gradient with respect to the raw
/// outputs. The gradient through a clamped variance is zero. The loss is
/// NaN if any raw log variance exceeds [`LOG_VAR_OVERFLOW`].
pub fn nll_loss_and_grad(out: &Array2<f64>, y: ArrayView1<f64>) -> (f64, Array2<f64>) {
    let n = y.len() as f64;
    let mut grad = Array2::zeros(out.raw_dim());
    let mut total = 0.0;
    for (i, (row, mut g)) in out.outer_iter().zip(grad.outer_iter_mut()).enumerate() {
        let (mu, s) = (row[0], row[1]);
        if !(s <= LOG_VAR_OVERFLOW) {
            total = f64::NAN;
        }
        let (var, clamped) = clamp_variance(s);
        let r = y[i] - mu;
        total += 0.5 * (var.ln() + r * r / var) + LN_SQRT_2PI;
        g[0] = -r / var / n;
        g[1] = if clamped {
            0.0
        } else {
            0.5 * (1.0 - r * r / var) / n
        };
    }
    (total / n, grad)
}

fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut RngStream) -> Array2<f64> {
    if rate >= 1.0 {
        return Array2::zeros((rows, cols));
    }
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn(
        (rows, cols),
        || if rng.uniform() < rate { 0.0 } else { keep },
    )
}

impl Mlp {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            layout,
            params: Array1::zeros(layout.n_params()),
        }
    }

    /// Fan-in uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and biases (He uniform with gain `sqrt(1/3)`).
    pub fn init(layout: Layout, rng: &mut RngStream) -> Self {
        let mut mlp = Self::zeros(layout);
        let o = layout.offsets();
        let fans = [layout.input, layout.hidden1, layout.hidden2];
        let p = mlp.params.as_slice_mut().expect("contiguous");
        for (k, fan) in fans.iter().enumerate() {
            let bound = 1.0 / (*fan as f64).sqrt();
            for w in &mut p[o[2 * k]..o[2 * k + 2]] {
                *w = bound * (2.0 * rng.uniform() - 1.0);
            }
        }
        mlp
    }

    pub fn from_params(layout: Layout, params: Array1<f64>) -> Result<Self> {
        if params.len() != layout.n_params() {
            return Err(Error::DimensionMismatch {
                expected: layout.n_params(),
                got: params.len(),
            });
        }
        Ok(Self { layout, params })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn params(&self) -> &Array1<f64> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Array1<f64> {
        &mut self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Batched forward pass; keeps the activations for [`Mlp::backward`].
    pub fn forward_cached(
        &self,
        x: ArrayView2<f64>,
        dropout: Option<Dropout<'_>>,
    ) -> Result<ForwardCache> {
        forward_with(
            &self.layout,
            self.params.as_slice().expect("contiguous"),
            x,
            dropout,
        )
    }

    /// Predictive mean and clamped log variance for each row of `x`.
    pub fn predict(
        &self,
        x: ArrayView2<f64>,
        dropout: Option<Dropout<'_>>,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        let cache = self.forward_cached(x, dropout)?;
        Ok(split_output(&cache.out))
    }

    /// Single-point forward pass returning `(mu, log_var)` with the variance clamp applied.
    pub fn forward(&self, x: &[f64], dropout: Option<Dropout<'_>>) -> Result<(f64, f64)> {
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        let (mu, lv) = self.predict(xv, dropout)?;
        Ok((mu[0], lv[0]))
    }

    /// Gradient of a loss with respect to all parameters, given the
    /// gradient with respect to the raw outputs.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        cache: &ForwardCache,
        dout: &Array2<f64>,
    ) -> Array1<f64> {
        backward_with(
            &self.layout,
            self.params.as_slice().expect("contiguous"),
            x,
            cache,
            dout,
        )
    }
}

/// Mean and clamped log variance columns from raw outputs.
pub fn split_output(out: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mu = out.column(0).to_owned();
    let lv = out.column(1).mapv(|s| clamp_variance(s).0.ln());
    (mu, lv)
}

pub(crate) fn forward_with(
    layout: &Layout,
    flat: &[f64],
    x: ArrayView2<f64>,
    mut dropout: Option<Dropout<'_>>,
) -> Result<ForwardCache> {
    if x.ncols() != layout.input {
        return Err(Error::DimensionMismatch {
            expected: layout.input,
            got: x.ncols(),
        });
    }
    let l = Layers::new(layout, flat);
    let n = x.nrows();

    let z1 = x.dot(&l.w1) + &l.b1;
    let mut a1 = z1.mapv(|v| v.max(0.0));
    let mask1 = dropout
        .as_mut()
        .map(|d| dropout_mask(n, layout.hidden1, d.rate, d.rng));
    if let Some(m) = &mask1 {
        a1 *= m;
    }
    let z2 = a1.dot(&l.w2) + &l.b2;
    let mut a2 = z2.mapv(|v| v.max(0.0));
    let mask2 = dropout
        .as_mut()
        .map(|d| dropout_mask(n, layout.hidden2, d.rate, d.rng));
    if let Some(m) = &mask2 {
        a2 *= m;
    }
    let out = a2.dot(&l.w3) + &l.b3;
    Ok(ForwardCache {
        z1,
        a1,
        mask1,
        z2,
        a2,
        mask2,
        out,
    })
}

pub(crate) fn backward_with(
    layout: &Layout,
    flat: &[f64],
    x: ArrayView2<f64>,
    c: &ForwardCache,
    dout: &Array2<f64>,
) -> Array1<f64> {
    let l = Layers::new(layout, flat);
    let o = layout.offsets();
    let mut grad = Array1::zeros(layout.n_params());

    let relu_back = |da: Array2<f64>, z: &Array2<f64>, mask: &Option<Array2<f64>>| -> Array2<f64> {
        let mut dz = da;
        match mask {
            Some(m) => Zip::from(&mut dz).and(z).and(m).for_each(|g, &zv, &mv| {
                *g = if zv > 0.0 { *g * mv } else { 0.0 };
            }),
            None => Zip::from(&mut dz).and(z).for_each(|g, &zv| {
                if zv <= 0.0 {
                    *g = 0.0;
                }
            }),
        }
        dz
    };

    let gw3 = c.a2.t().dot(dout);
    let gb3 = dout.sum_axis(Axis(0));
    let dz2 = relu_back(dout.dot(&l.w3.t()), &c.z2, &c.mask2);
    let gw2 = c.a1.t().dot(&dz2);
    let gb2 = dz2.sum_axis(Axis(0));
    let dz1 = relu_back(dz2.dot(&l.w2.t()), &c.z1, &c.mask1);
    let gw1 = x.t().dot(&dz1);
    let gb1 = dz1.sum_axis(Axis(0));

    let parts: [(usize, Vec<f64>); 6] = [
        (0, standard_layout_vec(gw1)),
        (1, gb1.to_vec()),
        (2, standard_layout_vec(gw2)),
        (3, gb2.to_vec()),
        (4, standard_layout_vec(gw3)),
        (5, gb3.to_vec()),
    ];
    for (k, v) in parts {
        grad.slice_mut(s![o[k]..o[k + 1]])
            .assign(&ArrayView1::from(&v[..]));
    }
    grad
}

fn standard_layout_vec(a: Array2<f64>) -> Vec<f64> {
    if a.is_standard_layout() {
        a.into_raw_vec_and_offset().0
    } else {
        a.iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    /// Adam with decoupled weight decay applied after the adaptive step.
    Adam {
        lr: f64,
        weight_decay: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    /// Heavy-ball SGD with optional cosine annealing over the run.
    MomentumSgd {
        lr: f64,
        momentum: f64,
        cosine: bool,
    },
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn momentum_sgd() -> Self {
        OptimizerConfig::MomentumSgd {
            lr: 1e-2,
            momentum: 0.9,
            cosine: true,
        }
    }

    pub fn with_lr(self, new_lr: f64) -> Self {
        match self {
            OptimizerConfig::Adam {
                weight_decay,
                beta1,
                beta2,
                eps,
                ..
            } => OptimizerConfig::Adam {
                lr: new_lr,
                weight_decay,
                beta1,
                beta2,
                eps,
            },
            OptimizerConfig::MomentumSgd {
                momentum, cosine, ..
            } => OptimizerConfig::MomentumSgd {
                lr: new_lr,
                momentum,
                cosine,
            },
        }
    }

    pub fn with_weight_decay(self, wd: f64) -> Self {
        match self {
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                ..
            } => OptimizerConfig::Adam {
                lr,
                weight_decay: wd,
                beta1,
                beta2,
                eps,
            },
            other => other,
        }
    }
}

/// `lr0 * (1 + cos(pi * epoch / total)) / 2`.
pub fn cosine_lr(lr0: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos())
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    total_epochs: usize,
    step: u64,
    m: Array1<f64>,
    v: Array1<f64>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, n_params: usize, total_epochs: usize) -> Self {
        Self {
            config,
            total_epochs,
            step: 0,
            m: Array1::zeros(n_params),
            v: Array1::zeros(n_params),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        match self.config {
            OptimizerConfig::Adam { lr, .. } => lr,
            OptimizerConfig::MomentumSgd {
                lr, cosine: true, ..
            } => cosine_lr(lr, epoch, self.total_epochs),
            OptimizerConfig::MomentumSgd { lr, .. } => lr,
        }
    }

    pub fn step(&mut self, params: &mut Array1<f64>, grad: &Array1<f64>, epoch: usize) {
        self.step += 1;
        let lr = self.learning_rate(epoch);
        match self.config {
            OptimizerConfig::Adam {
                weight_decay,
                beta1,
                beta2,
                eps,
                ..
            } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                Zip::from(params)
                    .and(grad)
                    .and(&mut self.m)
                    .and(&mut self.v)
                    .for_each(|p, &g, m, v| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                        *p -= lr * update;
                        *p -= lr * weight_decay * *p;
                    });
            }
            OptimizerConfig::MomentumSgd { momentum, .. } => {
                Zip::from(params)
                    .and(grad)
                    .and(&mut self.m)
                    .for_each(|p, &g, buf| {
                        *buf = momentum * *buf + g;
                        *p -= lr * *buf;
                    });
            }
        }
    }
}

/// Full-batch NLL training.
///
/// `on_epoch` is called after each parameter update with the epoch index
/// and the updated network. A non-finite loss aborts with
/// [`Error::ConvergenceFailure`].
pub fn train_epochs<F>(
    mlp: &mut Mlp,
    data: DataView<'_>,
    opt: &mut Optimizer,
    epochs: usize,
    dropout_rate: Option<f64>,
    rng: &mut RngStream,
    mut on_epoch: F,
) -> Result<Vec<f64>>
where
    F: FnMut(usize, &Mlp),
{
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let dropout = dropout_rate.filter(|r| *r > 0.0).map(|rate| Dropout {
            rate,
            rng: &mut *rng,
        });
        let cache = mlp.forward_cached(data.x, dropout)?;
        let (loss, dout) = nll_loss_and_grad(&cache.out, data.y);
        if !loss.is_finite() {
            return Err(Error::ConvergenceFailure { epoch });
        }
        trace.push(loss);
        let grad = mlp.backward(data.x, &cache, &dout);
        opt.step(&mut mlp.params, &grad, epoch);
        on_epoch(epoch, mlp);
    }
    Ok(trace)
}

/// Write a loss trace as `epoch,loss` CSV.
pub fn write_loss_trace<W: std::io::Write>(trace: &[f64], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["epoch", "loss"])?;
    for (e, l) in trace.iter().enumerate() {
        wr.write_record([e.to_string(), l.to_string()])?;
    }
    wr.flush().map_err(|e| Error::io("<loss trace>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_data(n: usize, d: usize, seed: u64) -> (Array2<f64>, Array1<f64>) {
        let mut rng = RngStream::new(seed, "data");
        let x = Array2::from_shape_simple_fn((n, d), || rng.normal());
        let y = Array1::from_shape_simple_fn(n, || rng.normal());
        (x, y)
    }

    fn loss_at(mlp: &Mlp, x: &Array2<f64>, y: &Array1<f64>) -> f64 {
        let c = mlp.forward_cached(x.view(), None).unwrap();
        nll_loss_and_grad(&c.out, y.view()).0
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = Mlp::zeros(Layout::standard(8));
        let (mu, lv) = mlp
            .forward(&[0.3, -1.0, 2.0, 0.0, 5.0, 1.0, 1.0, -4.0], None)
            .unwrap();
        assert_eq!((mu, lv), (0.0, 0.0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mlp = Mlp::zeros(Layout::standard(8));
        assert!(matches!(
            mlp.forward(&[1.0, 2.0], None),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dropout_rate_zero_matches_plain_forward() {
        let mut rng = RngStream::new(3, "init");
        let mlp = Mlp::init(Layout::standard(4), &mut rng);
        let x = [0.1, -0.4, 1.3, 0.7];
        let plain = mlp.forward(&x, None).unwrap();
        let mut drng = RngStream::new(3, "dropout");
        let zero = mlp
            .forward(
                &x,
                Some(Dropout {
                    rate: 0.0,
                    rng: &mut drng,
                }),
            )
            .unwrap();
        assert_eq!(plain.0.to_bits(), zero.0.to_bits());
        assert_eq!(plain.1.to_bits(), zero.1.to_bits());
    }

    #[test]
    fn full_dropout_reduces_to_output_bias() {
        let mut rng = RngStream::new(5, "init");
        let mut mlp = Mlp::init(Layout::new(3, 4, 4), &mut rng);
        let n = mlp.params().len();
        // give the output bias a recognizable value
        mlp.params_mut()[n - 2] = 0.25;
        mlp.params_mut()[n - 1] = -0.5;
        let mut drng = RngStream::new(5, "dropout");
        let (mu, lv) = mlp
            .forward(
                &[1.0, 2.0, 3.0],
                Some(Dropout {
                    rate: 1.0,
                    rng: &mut drng,
                }),
            )
            .unwrap();
        assert_eq!(mu, 0.25);
        assert_eq!(lv, -0.5);
    }

    #[test]
    fn nll_reference_values() {
        assert!((gaussian_nll(0.0, 0.0, 0.0) - 0.918_938_533_204_672_7).abs() < 1e-12);
        assert!((gaussian_nll(0.0, 0.0, 1.0) - 1.418_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn nll_mean_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(11, "configs");
        for _ in 0..100 {
            let mu = rng.normal();
            let lv = 0.5 * rng.normal();
            let y = rng.normal();
            let analytic = -(y - mu) * (-lv).exp();
            let h = 1e-6;
            let fd = (gaussian_nll(mu + h, lv, y) - gaussian_nll(mu - h, lv, y)) / (2.0 * h);
            let rel = (analytic - fd).abs() / analytic.abs().max(1e-3);
            assert!(rel < 1e-6, "rel {rel}");
        }
    }

    #[test]
    fn variance_clamp_bounds() {
        for s in [-50.0, -7.0, 0.0, 7.0, 50.0] {
            let (v, _) = clamp_variance(s);
            assert!((VAR_MIN..=VAR_MAX).contains(&v));
        }
    }

    #[test]
    fn log_variance_overflow_is_a_nonfinite_loss() {
        let y = Array1::from(vec![0.0, 0.0]);
        let ok = Array2::from_shape_vec((2, 2), vec![0.0, 88.0, 0.0, 0.0]).unwrap();
        assert!(nll_loss_and_grad(&ok, y.view()).0.is_finite());
        let bad = Array2::from_shape_vec((2, 2), vec![0.0, 89.0, 0.0, 0.0]).unwrap();
        assert!(nll_loss_and_grad(&bad, y.view()).0.is_nan());
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for seed in 0..5 {
            let layout = Layout::new(3, 4, 4);
            let mut rng = RngStream::new(seed, "init");
            let mut mlp = Mlp::init(layout, &mut rng);
            // nonzero biases exercise every parameter block
            for p in mlp.params_mut().iter_mut() {
                *p += 0.1 * rng.normal();
            }
            let (x, y) = random_data(7, 3, seed + 100);
            let c = mlp.forward_cached(x.view(), None).unwrap();
            let (_, dout) = nll_loss_and_grad(&c.out, y.view());
            let grad = mlp.backward(x.view(), &c, &dout);
            let h = 1e-6;
            for k in 0..layout.n_params() {
                let mut plus = mlp.clone();
                plus.params_mut()[k] += h;
                let mut minus = mlp.clone();
                minus.params_mut()[k] -= h;
                let fd = (loss_at(&plus, &x, &y) - loss_at(&minus, &x, &y)) / (2.0 * h);
                let denom = grad[k].abs().max(fd.abs()).max(1e-4);
                assert!(
                    (grad[k] - fd).abs() / denom < 1e-5,
                    "param {k}: {} vs {fd}",
                    grad[k]
                );
            }
        }
    }

    #[test]
    fn cosine_schedule_is_monotone_and_reaches_floor() {
        let lrs: Vec<f64> = (0..=500).map(|e| cosine_lr(1e-2, e, 500)).collect();
        assert_eq!(lrs[0], 1e-2);
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs[500].abs() < 1e-18);
    }

    #[test]
    fn zero_epochs_and_zero_lr_leave_params_unchanged() {
        let (x, y) = random_data(20, 3, 1);
        let data = DataView::new(&x, &y);
        let mut rng = RngStream::new(1, "init");
        let mlp0 = Mlp::init(Layout::new(3, 8, 8), &mut rng);

        let mut mlp = mlp0.clone();
        let mut opt = Optimizer::new(OptimizerConfig::adam(), mlp.params().len(), 0);
        train_epochs(&mut mlp, data, &mut opt, 0, None, &mut rng, |_, _| {}).unwrap();
        assert_eq!(mlp, mlp0);

        let mut mlp = mlp0.clone();
        let cfg = OptimizerConfig::adam().with_lr(0.0);
        let mut opt = Optimizer::new(cfg, mlp.params().len(), 50);
        train_epochs(&mut mlp, data, &mut opt, 50, Some(0.1), &mut rng, |_, _| {}).unwrap();
        assert_eq!(mlp, mlp0);
        assert_eq!(opt.steps_taken(), 50);
    }

    #[test]
    fn constant_target_is_learned() {
        let (x, _) = random_data(40, 3, 2);
        let y = Array1::from_elem(40, 1.7);
        let mut rng = RngStream::new(2, "init");
        let mut mlp = Mlp::init(Layout::new(3, 16, 16), &mut rng);
        let mut opt = Optimizer::new(
            OptimizerConfig::adam().with_lr(1e-2),
            mlp.params().len(),
            3000,
        );
        train_epochs(
            &mut mlp,
            DataView::new(&x, &y),
            &mut opt,
            3000,
            None,
            &mut rng,
            |_, _| {},
        )
        .unwrap();
        let (mu, _) = mlp.predict(x.view(), None).unwrap();
        assert!(mu.iter().all(|m| (m - 1.7).abs() < 1e-2), "{mu}");
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = random_data(30, 3, 3);
        let run = || {
            let mut rng = RngStream::new(9, "init");
            let mut mlp = Mlp::init(Layout::new(3, 8, 8), &mut rng);
            let mut opt = Optimizer::new(OptimizerConfig::adam(), mlp.params().len(), 30);
            let trace = train_epochs(
                &mut mlp,
                DataView::new(&x, &y),
                &mut opt,
                30,
                Some(0.2),
                &mut rng,
                |_, _| {},
            )
            .unwrap();
            (mlp, trace)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_reports_epoch() {
        let (x, y) = random_data(30, 3, 4);
        let mut rng = RngStream::new(4, "init");
        let mut mlp = Mlp::init(Layout::new(3, 8, 8), &mut rng);
        let cfg = OptimizerConfig::MomentumSgd {
            lr: 1e6,
            momentum: 0.9,
            cosine: false,
        };
        let mut opt = Optimizer::new(cfg, mlp.params().len(), 200);
        let err = train_epochs(
            &mut mlp,
            DataView::new(&x, &y),
            &mut opt,
            200,
            None,
            &mut rng,
            |_, _| {},
        )
        .unwrap_err();
        assert!(matches!(err, Error::ConvergenceFailure { .. }));
    }
}
