//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 1-7 are property and oracle checks. Criteria 8-14 read the
//! full synthetic experiment (seed 42, R = 50, n in {30, 50, 100, 200, 500}),
//! which is run once and cached under the cargo target tmp directory; later
//! invocations resume from the cache.
//!
//! Set `ACCEPTANCE_STRICT=1` to turn any FAIL into a nonzero exit status.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::Array2;
use statrs::distribution::{ContinuousCDF, Normal};
use uqbench::pipeline::LoadedFit;
use uqbench::report::compute;
use uqbench::{ExperimentConfig, Run};
use uqbench_core::analysis::{mdd, rank_probability, VarianceMode};
use uqbench_core::hier::{
    closed_form_posterior, closed_form_rank_prob, fit_gaussian, param_diagnostic, rank_rhat,
    FixedHyper, GaussianBhmSpec, SamplerConfig, ESS_MIN, RHAT_MAX,
};
use uqbench_core::methods::{conformal_quantile, conformal_rank};
use uqbench_core::nn::{nll_loss_and_grad, Layout, Mlp};
use uqbench_core::scoring::{crps_gaussian, crps_sample};
use uqbench_core::{CellKey, MethodId, MetricId, MetricTable, RngStream};

type Outcome = (bool, String);

fn main() {
    let mut results: Vec<(usize, Outcome)> = vec![
        (1, crps_quadrature()),
        (2, crps_sampling()),
        (3, gradient_check()),
        (4, mcmc_oracle()),
        (5, diagnostics_reference()),
        (7, conformal_index()),
    ];
    match Experiment::load() {
        Ok(exp) => {
            results.push((6, exp.complement_and_detectability()));
            results.push((8, exp.table1_ordering()));
            results.push((9, exp.variance_shrinkage()));
            results.push((10, exp.ranking_reversal()));
            results.push((11, exp.mdd_at_50()));
            results.push((12, exp.map_overconfidence()));
            results.push((13, exp.swag_failures()));
            results.push((14, exp.kendall_consistency()));
        }
        Err(e) => {
            for c in [6, 8, 9, 10, 11, 12, 13, 14] {
                results.push((c, (false, format!("experiment unavailable: {e:#}"))));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (c, (ok, detail)) in &results {
        failed += !ok as usize;
        println!(
            "criterion {c:>2}: {}  {detail}",
            if *ok { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "{}/{} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

fn crps_by_quadrature(mu: f64, sigma: f64, y: f64) -> f64 {
    let std = Normal::new(0.0, 1.0).unwrap();
    let zy = (y - mu) / sigma;
    let simpson = |a: f64, b: f64, f: &dyn Fn(f64) -> f64| {
        if b <= a {
            return 0.0;
        }
        let steps = ((((b - a) / 1e-3).ceil() as usize) & !1usize).max(2);
        let h = (b - a) / steps as f64;
        let mut s = f(a) + f(b);
        for i in 1..steps {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + h * i as f64);
        }
        s * h / 3.0
    };
    let below = simpson(zy.min(-12.0), zy, &|z: f64| std.cdf(z).powi(2));
    let above = simpson(zy, zy.max(12.0), &|z: f64| (1.0 - std.cdf(z)).powi(2));
    sigma * (below + above)
}

fn crps_quadrature() -> Outcome {
    let mut rng = RngStream::new(1, "acceptance/crps");
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let mu = -5.0 + 10.0 * rng.uniform();
        let sigma = 0.05 + 4.95 * rng.uniform();
        let y = -10.0 + 20.0 * rng.uniform();
        let cf = crps_gaussian(mu, sigma, y).unwrap();
        worst = worst.max((cf - crps_by_quadrature(mu, sigma, y)).abs());
    }
    (
        worst <= 1e-6,
        format!("max abs error {worst:.2e} (limit 1e-6)"),
    )
}

fn crps_sampling() -> Outcome {
    let mut rng = RngStream::new(2, "acceptance/crps-sample");
    let (mut est, mut exact) = (0.0, 0.0);
    let mut buf = vec![0.0; 2048];
    for _ in 0..100 {
        let mu = rng.normal();
        let sigma = 0.1 + 2.0 * rng.uniform();
        let y = mu + sigma * rng.normal();
        for b in buf.iter_mut() {
            *b = mu + sigma * rng.normal();
        }
        est += crps_sample(&mut buf, y).unwrap();
        exact += crps_gaussian(mu, sigma, y).unwrap();
    }
    let rel = (est - exact).abs() / exact;
    (
        rel <= 0.005,
        format!("relative error {:.3}% (limit 0.5%)", 100.0 * rel),
    )
}

fn gradient_check() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = RngStream::new(seed, "acceptance/grad");
        let d = 1 + rng.below(4);
        let layout = Layout::new(d, 2 + rng.below(5), 2 + rng.below(5));
        let mut mlp = Mlp::init(layout, &mut rng);
        for p in mlp.params_mut().iter_mut() {
            *p += 0.1 * rng.normal();
        }
        let x = Array2::from_shape_simple_fn((6, d), || rng.normal());
        let y = ndarray::Array1::from_shape_simple_fn(6, || rng.normal());
        let loss = |m: &Mlp| {
            let c = m.forward_cached(x.view(), None).unwrap();
            nll_loss_and_grad(&c.out, y.view()).0
        };
        let c = mlp.forward_cached(x.view(), None).unwrap();
        let (_, dout) = nll_loss_and_grad(&c.out, y.view());
        let grad = mlp.backward(x.view(), &c, &dout);
        let h = 1e-6;
        for k in 0..layout.n_params() {
            let mut plus = mlp.clone();
            plus.params_mut()[k] += h;
            let mut minus = mlp.clone();
            minus.params_mut()[k] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let denom = grad[k].abs().max(fd.abs()).max(1e-4);
            worst = worst.max((grad[k] - fd).abs() / denom);
        }
    }
    (
        worst <= 1e-5,
        format!("max relative error {worst:.2e} over 10 MLPs (limit 1e-5)"),
    )
}

fn mcmc_oracle() -> Outcome {
    let cfg = SamplerConfig {
        iterations: 6000,
        ..SamplerConfig::default()
    };
    let sigma = [0.1, 0.15];
    let fixed = FixedHyper {
        sigma: sigma.to_vec(),
        tau: 0.2,
        mu0: 0.3,
    };
    let (r, mut worst_p, mut worst_z) = (30usize, 0.0f64, 0.0f64);
    for d in 0..20u64 {
        let mut rng = RngStream::new(100 + d, "test/data");
        let y = Array2::from_shape_fn((2, r), |(j, _)| [0.25, 0.28][j] + sigma[j] * rng.normal());
        let mut spec = GaussianBhmSpec::new(vec!["a".into(), "b".into()], y.clone());
        spec.fixed = Some(fixed.clone());
        let post = match fit_gaussian(&spec, &cfg, d).map(|f| f.converged()) {
            Ok(Ok(p)) => p,
            Ok(Err(e)) | Err(e) => return (false, format!("dataset {d}: {e}")),
        };
        let a = post.mu_draws("a").unwrap();
        let b = post.mu_draws("b").unwrap();
        let cf: Vec<_> = (0..2)
            .map(|j| {
                let y_bar = y.row(j).mean().unwrap();
                closed_form_posterior(y_bar, sigma[j], fixed.tau, fixed.mu0, r).unwrap()
            })
            .collect();
        let p_mc = a
            .iter()
            .zip(&b)
            .map(|(x, y)| {
                if x < y {
                    1.0
                } else if x == y {
                    0.5
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            / a.len() as f64;
        worst_p = worst_p.max((p_mc - closed_form_rank_prob(&cf[0], &cf[1])).abs());
        for (draws, c) in [(&a, &cf[0]), (&b, &cf[1])] {
            let m = draws.iter().sum::<f64>() / draws.len() as f64;
            let se = (c.variance / draws.len() as f64).sqrt();
            worst_z = worst_z.max((m - c.mean).abs() / se);
        }
    }
    (
        worst_p <= 0.02 && worst_z <= 3.0,
        format!("max |ΔP| {worst_p:.4} (limit 0.02), max mean error {worst_z:.2} MC SE (limit 3)"),
    )
}

fn diagnostics_reference() -> Outcome {
    let mut rng = RngStream::new(5, "acceptance/diag");
    let mut chains: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..1000).map(|_| rng.normal()).collect())
        .collect();
    let (rhat, ess, _) = param_diagnostic(&chains);
    let iid_ok = rhat <= RHAT_MAX && ess >= ESS_MIN;
    for v in chains[0].iter_mut() {
        *v += 5.0;
    }
    let offset = rank_rhat(&chains);
    (
        iid_ok && offset > 1.2,
        format!("iid R̂ {rhat:.4}, ESS {ess:.0}; offset-chain R̂ {offset:.2}"),
    )
}

fn conformal_index() -> Outcome {
    let mut rng = RngStream::new(7, "acceptance/conformal");
    let mut checked = 0;
    for pct in [95usize, 90, 80] {
        let level = pct as f64 / 100.0;
        for n in 1..=30usize {
            // smallest k with k / (n + 1) >= level, capped at n
            let k = (1..=n + 1)
                .find(|k| 100 * k >= pct * (n + 1))
                .unwrap()
                .min(n);
            if conformal_rank(n, level) != k {
                return (
                    false,
                    format!(
                        "n_cal={n}, level {level}: rank {} vs {k}",
                        conformal_rank(n, level)
                    ),
                );
            }
            if n >= 2 {
                let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
                // order statistic by counting: the score with exactly k-1 smaller
                let oracle = scores
                    .iter()
                    .copied()
                    .find(|s| scores.iter().filter(|t| *t < s).count() == k - 1)
                    .unwrap();
                if conformal_quantile(&scores, level).unwrap() != oracle {
                    return (
                        false,
                        format!("quantile mismatch at n_cal={n}, level {level}"),
                    );
                }
            }
            checked += 1;
        }
    }
    (true, format!("{checked} (n_cal, α) cases match"))
}

struct Experiment {
    run: Run,
    table: MetricTable,
    fits: BTreeMap<(MetricId, usize), LoadedFit>,
}

fn fmt_ok(v: bool) -> &'static str {
    if v {
        "ok"
    } else {
        "violated"
    }
}

impl Experiment {
    fn load() -> anyhow::Result<Self> {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        let mut run = Run::create(&root, ExperimentConfig::default())?;
        eprintln!("experiment directory: {}", run.dir.display());
        run.execute()?;
        let table = run.load_table()?;
        let mut fits = BTreeMap::new();
        for r in run.fit_records()? {
            if r.is_fitted() {
                fits.insert((r.metric, r.n), run.load_fit(r.metric, r.n)?);
            }
        }
        Ok(Self { run, table, fits })
    }

    fn mean(&self, m: MethodId, n: usize, metric: MetricId) -> f64 {
        let v: Vec<f64> = self.table.slice(n, metric)[&m].values().copied().collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn sd(&self, m: MethodId, n: usize, metric: MetricId) -> f64 {
        let v: Vec<f64> = self.table.slice(n, metric)[&m].values().copied().collect();
        uqbench_core::stats::sample_variance(&v).sqrt()
    }

    fn complement_and_detectability(&self) -> Outcome {
        let (mut pairs, mut checks) = (0, 0);
        for ((metric, n), f) in &self.fits {
            let Ok(post) = f.fit.clone().converged() else {
                continue;
            };
            let labels = post.labels().to_vec();
            for a in &labels {
                for b in labels.iter().filter(|b| *b != a) {
                    let p = rank_probability(&post, a, b).unwrap();
                    let q = rank_probability(&post, b, a).unwrap();
                    if p + q != 1.0 {
                        return (false, format!("{metric} n={n} {a}/{b}: {p} + {q} != 1"));
                    }
                    pairs += 1;
                    for gamma in [0.6, 0.7, 0.8, 0.9, 0.95] {
                        let pt = mdd(&post, a, b, gamma, *n, VarianceMode::PosteriorMean).unwrap();
                        if (pt.observed_gap >= pt.mdd) != (pt.detect_prob >= gamma) {
                            return (
                                false,
                                format!("{metric} n={n} {a}/{b} γ={gamma}: inconsistent"),
                            );
                        }
                        checks += 1;
                    }
                }
            }
        }
        (
            pairs > 0,
            format!("{pairs} ordered pairs exact, {checks} MDD/detectability checks consistent"),
        )
    }

    fn table1_ordering(&self) -> Outcome {
        use MethodId::*;
        let c = |m| self.mean(m, 500, MetricId::Crps);
        let min_ok = [Map, Ensemble, Bbb, Cp].iter().all(|&m| c(Mcd) < c(m));
        let ok =
            c(Mcd) < c(Bbb) && c(Ensemble) < c(Map) && min_ok && (0.12..=0.18).contains(&c(Mcd));
        (
            ok,
            format!(
                "n=500 CRPS MAP {:.3} MCD {:.3} Ens {:.3} SWAG {:.3} BBB {:.3} CP {:.3}",
                c(Map),
                c(Mcd),
                c(Ensemble),
                c(Swag),
                c(Bbb),
                c(Cp)
            ),
        )
    }

    fn variance_shrinkage(&self) -> Outcome {
        let a = compute(&self.run, &self.table).unwrap();
        let alpha = |m| {
            a.power
                .iter()
                .find(|p| p.method == m && p.metric == MetricId::Crps)
                .map(|p| p.alpha)
                .unwrap_or(f64::NAN)
        };
        let mut bad = Vec::new();
        for m in MethodId::ALL.into_iter().filter(|m| *m != MethodId::Swag) {
            let sds: Vec<f64> = [50, 100, 200, 500]
                .iter()
                .map(|&n| self.sd(m, n, MetricId::Crps))
                .collect();
            if !sds.windows(2).all(|w| w[1] < w[0]) {
                bad.push(format!("{m} SD {sds:.4?}"));
            }
        }
        let (am, ap) = (alpha(MethodId::Mcd), alpha(MethodId::Map));
        let ok = bad.is_empty() && (0.6..=1.0).contains(&am) && (0.3..=0.7).contains(&ap);
        (
            ok,
            format!(
                "SD decreasing 50→500: {}; α MCD {am:.2} MAP {ap:.2} (log-SD slopes {:.2}, {:.2}){}",
                fmt_ok(bad.is_empty()),
                am / 2.0,
                ap / 2.0,
                if bad.is_empty() {
                    String::new()
                } else {
                    format!(" [{}]", bad.join("; "))
                }
            ),
        )
    }

    fn focus_prob(&self, n: usize) -> Result<f64, String> {
        let f = self
            .fits
            .get(&(MetricId::Crps, n))
            .ok_or_else(|| format!("no CRPS fit at n={n}"))?;
        let post = f
            .fit
            .clone()
            .converged()
            .map_err(|e| format!("n={n}: {e}"))?;
        rank_probability(&post, "MCD", "Ensemble").map_err(|e| e.to_string())
    }

    fn ranking_reversal(&self) -> Outcome {
        let mut probs = Vec::new();
        for n in [30, 50, 100, 200, 500] {
            match self.focus_prob(n) {
                Ok(p) => probs.push((n, p)),
                Err(e) => return (false, e),
            }
        }
        let ok = probs[0].1 < 0.5 && probs[1..].iter().all(|(_, p)| *p > 0.95);
        let row: Vec<String> = probs
            .iter()
            .map(|(n, p)| format!("n={n}: {p:.3}"))
            .collect();
        (ok, format!("P(MCD≺Ensemble) {}", row.join(", ")))
    }

    fn mdd_at_50(&self) -> Outcome {
        let point = |n: usize| -> Result<_, String> {
            let f = self
                .fits
                .get(&(MetricId::Crps, n))
                .ok_or_else(|| format!("no CRPS fit at n={n}"))?;
            let post = f.fit.clone().converged().map_err(|e| e.to_string())?;
            mdd(
                &post,
                "MCD",
                "Ensemble",
                0.8,
                n,
                VarianceMode::PosteriorMean,
            )
            .map_err(|e| e.to_string())
        };
        let (p50, p200) = match (point(50), point(200)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return (false, e),
        };
        let ok = p50.mdd > p50.observed_gap
            && (0.6..=0.85).contains(&p50.detect_prob)
            && p200.detect_prob >= 0.8;
        (
            ok,
            format!(
                "n=50 MDD {:.4} gap {:.4} detect {:.3}; n=200 detect {:.3}",
                p50.mdd, p50.observed_gap, p50.detect_prob, p200.detect_prob
            ),
        )
    }

    fn map_overconfidence(&self) -> Outcome {
        let map: Vec<(usize, f64)> = [30, 50, 100, 200]
            .iter()
            .map(|&n| (n, self.mean(MethodId::Map, n, MetricId::Picp)))
            .collect();
        let cp = self.mean(MethodId::Cp, 50, MetricId::Picp);
        let ok = map.iter().all(|(_, v)| *v < 0.10) && (0.85..=0.98).contains(&cp);
        let row: Vec<String> = map.iter().map(|(n, v)| format!("{n}: {v:.3}")).collect();
        (
            ok,
            format!("MAP PICP {}; CP PICP n=50 {cp:.3}", row.join(", ")),
        )
    }

    fn swag_failures(&self) -> Outcome {
        let rate = |n| {
            self.table
                .convergence_rate(MethodId::Swag, n)
                .unwrap_or(f64::NAN)
        };
        let (r30, r200) = (rate(30), rate(200));
        let mut leaked = 0;
        let mut inputs = 0;
        for f in self.fits.values() {
            for m in &f.record.methods {
                for r in &f.record.realizations {
                    inputs += 1;
                    if self.table.is_converged(&CellKey::new(*m, *r, f.record.n)) != Some(true) {
                        leaked += 1;
                    }
                }
            }
        }
        (
            r30 < r200 && leaked == 0,
            format!("SWAG convergence n=30 {r30:.2}, n=200 {r200:.2}; {leaked} failed cells among {inputs} BHM inputs"),
        )
    }

    fn kendall_consistency(&self) -> Outcome {
        let a = compute(&self.run, &self.table).unwrap();
        let at = |n| a.kendall.iter().find(|k| k.n == n).map(|k| k.median);
        match (at(30), at(500)) {
            (Some(t30), Some(t500)) => (
                t500 > t30 && t500 < 1.0,
                format!("median τ(CRPS, IS) n=30 {t30:.3}, n=500 {t500:.3}"),
            ),
            _ => (false, "Kendall summaries missing".into()),
        }
    }
}
