//! Analysis tables and report figures derived from a run's artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Result;
use uqbench_core::analysis::{
    compare_all, convergence_rates, kendall_by_n, mdd, mdd_scaling_check, metric_summaries,
    power_law_fit, ComparisonResult, KendallSummary, MddCurve, MddScaling, MetricSummary,
    PowerLawFit, VarianceMode, CONCLUSIVE_HIGH, CONCLUSIVE_LOW,
};
use uqbench_core::hier::PPC_QUANTILES;
use uqbench_core::{MethodId, MetricId, MetricTable};

use crate::pipeline::{write_atomic, FitRecord, Run};
use crate::svg::{heatmap, LineChart, Series};

pub fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_atomic(path, &csv_bytes(header, rows)?)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Everything downstream of the fits, computed from persisted artifacts.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub records: Vec<FitRecord>,
    pub summaries: Vec<MetricSummary>,
    pub rates: BTreeMap<(MethodId, usize), f64>,
    pub power: Vec<PowerLawFit>,
    pub comparisons: BTreeMap<MetricId, Vec<ComparisonResult>>,
    /// Focus-pair MDD curve per metric.
    pub mdd: BTreeMap<MetricId, MddCurve>,
    /// Exponent used and the scaling report, per metric.
    pub scaling: BTreeMap<MetricId, (f64, MddScaling)>,
    pub kendall: Vec<KendallSummary>,
}

pub fn compute(run: &Run, table: &MetricTable) -> Result<Analysis> {
    let records = run.fit_records()?;
    let (fa, fb) = run.cfg.focus;
    let (la, lb) = (fa.to_string(), fb.to_string());

    let mut power = Vec::new();
    for &metric in &run.cfg.metrics {
        for &m in &run.cfg.methods {
            if let Ok(p) = power_law_fit(table, m, metric) {
                power.push(p);
            }
        }
    }

    let mut comparisons: BTreeMap<MetricId, Vec<ComparisonResult>> = BTreeMap::new();
    let mut curves: BTreeMap<MetricId, MddCurve> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_fitted() && r.passed) {
        let post = run.load_fit(r.metric, r.n)?.posterior()?;
        comparisons
            .entry(r.metric)
            .or_default()
            .push(compare_all(&post, r.n, r.metric)?);
        if post.labels().contains(&la) && post.labels().contains(&lb) {
            let p = mdd(
                &post,
                &la,
                &lb,
                run.cfg.gamma,
                r.n,
                VarianceMode::PosteriorMean,
            )?;
            curves
                .entry(r.metric)
                .or_insert_with(|| MddCurve {
                    metric: r.metric,
                    a: la.clone(),
                    b: lb.clone(),
                    points: Vec::new(),
                })
                .points
                .push(p);
        }
    }

    let mut scaling = BTreeMap::new();
    for (metric, curve) in &curves {
        let alphas: Vec<f64> = power
            .iter()
            .filter(|p| p.metric == *metric && (p.method == fa || p.method == fb))
            .map(|p| p.alpha)
            .collect();
        if alphas.len() == 2 {
            let alpha = 0.5 * (alphas[0] + alphas[1]);
            let pts: Vec<(usize, f64)> = curve.points.iter().map(|p| (p.n, p.mdd)).collect();
            scaling.insert(*metric, (alpha, mdd_scaling_check(alpha, &pts)));
        }
    }

    let kendall = if run.cfg.metrics.contains(&MetricId::Crps)
        && run.cfg.metrics.contains(&MetricId::IntervalScore)
    {
        kendall_by_n(table, MetricId::Crps, MetricId::IntervalScore)?
    } else {
        Vec::new()
    };

    Ok(Analysis {
        records,
        summaries: metric_summaries(table),
        rates: convergence_rates(table),
        power,
        comparisons,
        mdd: curves,
        scaling,
        kendall,
    })
}

pub fn write_analysis(run: &Run, table: &MetricTable) -> Result<()> {
    let a = compute(run, table)?;
    let dir = run.path("analysis");

    let rows: Vec<Vec<String>> = a
        .summaries
        .iter()
        .map(|s| {
            vec![
                s.method.to_string(),
                s.n.to_string(),
                s.metric.to_string(),
                s.mean.to_string(),
                s.sd.to_string(),
                s.count.to_string(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("summary.csv"),
        &["method", "n", "metric", "mean", "sd", "count"],
        &rows,
    )?;

    let rows: Vec<Vec<String>> = a
        .rates
        .iter()
        .map(|((m, n), r)| vec![m.to_string(), n.to_string(), r.to_string()])
        .collect();
    write_csv(
        &dir.join("convergence.csv"),
        &["method", "n", "rate"],
        &rows,
    )?;

    let rows: Vec<Vec<String>> = a
        .power
        .iter()
        .map(|p| {
            vec![
                p.method.to_string(),
                p.metric.to_string(),
                p.alpha.to_string(),
                p.log_c.to_string(),
                p.r2.to_string(),
                p.levels.len().to_string(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("power_law.csv"),
        &["method", "metric", "alpha", "log_c", "r2", "levels"],
        &rows,
    )?;

    for (metric, cmps) in &a.comparisons {
        let mut rows = Vec::new();
        for c in cmps {
            for ((x, y), p) in &c.pair_prob {
                rows.push(vec![
                    c.n.to_string(),
                    metric.to_string(),
                    x.clone(),
                    y.clone(),
                    p.to_string(),
                ]);
            }
        }
        write_csv(
            &dir.join(format!("pairwise_{metric}.csv")),
            &["n", "metric", "a", "b", "p_a_better"],
            &rows,
        )?;
    }

    for (metric, curve) in &a.mdd {
        let mut buf = Vec::new();
        curve.write_csv(&mut buf)?;
        write_atomic(
            &dir.join(format!("mdd_{metric}_{}_{}.csv", curve.a, curve.b)),
            &buf,
        )?;
    }

    let rows: Vec<Vec<String>> = a
        .scaling
        .iter()
        .map(|(metric, (alpha, s))| {
            let (status, slope, expected, dev) = match s {
                MddScaling::Fitted {
                    slope,
                    expected,
                    deviation,
                } => ("fitted", Some(*slope), Some(*expected), Some(*deviation)),
                MddScaling::InsufficientLevels { .. } => ("insufficient levels", None, None, None),
            };
            vec![
                metric.to_string(),
                run.cfg.focus.0.to_string(),
                run.cfg.focus.1.to_string(),
                alpha.to_string(),
                status.to_string(),
                opt(slope),
                opt(expected),
                opt(dev),
            ]
        })
        .collect();
    write_csv(
        &dir.join("mdd_scaling.csv"),
        &[
            "metric",
            "a",
            "b",
            "alpha",
            "status",
            "slope",
            "expected",
            "deviation",
        ],
        &rows,
    )?;

    let rows: Vec<Vec<String>> = a
        .kendall
        .iter()
        .map(|k| {
            vec![
                k.n.to_string(),
                k.median.to_string(),
                k.mean.to_string(),
                k.realizations.to_string(),
            ]
        })
        .collect();
    write_csv(
        &dir.join("kendall.csv"),
        &["n", "median_tau", "mean_tau", "realizations"],
        &rows,
    )?;

    let rows: Vec<Vec<String>> = a.records.iter().map(fit_row).collect();
    write_csv(
        &dir.join("fits.csv"),
        &[
            "n",
            "metric",
            "model",
            "methods",
            "realizations",
            "excluded",
            "max_rhat",
            "min_ess",
            "status",
        ],
        &rows,
    )?;
    Ok(())
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

pub fn fit_status(r: &FitRecord) -> &'static str {
    match (r.is_fitted(), r.passed) {
        (false, _) => "skipped",
        (true, true) => "pass",
        (true, false) => "fail",
    }
}

fn fit_row(r: &FitRecord) -> Vec<String> {
    vec![
        r.n.to_string(),
        r.metric.to_string(),
        format!("{:?}", r.model),
        join(&r.methods),
        r.realizations.len().to_string(),
        join(&r.excluded),
        r.max_rhat.to_string(),
        r.min_ess.to_string(),
        fit_status(r).to_string(),
    ]
}

struct Figures {
    dir: std::path::PathBuf,
    index: Vec<Vec<String>>,
}

impl Figures {
    /// Write an SVG and the CSV holding every number it draws.
    fn emit(
        &mut self,
        stem: &str,
        what: &str,
        svg: &str,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> Result<()> {
        write_atomic(&self.dir.join(format!("{stem}.svg")), svg.as_bytes())?;
        write_csv(&self.dir.join(format!("{stem}.csv")), header, rows)?;
        self.index.push(vec![
            format!("{stem}.svg"),
            format!("{stem}.csv"),
            what.to_string(),
        ]);
        Ok(())
    }

    fn table(
        &mut self,
        stem: &str,
        what: &str,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> Result<()> {
        write_csv(&self.dir.join(format!("{stem}.csv")), header, rows)?;
        self.index
            .push(vec![String::new(), format!("{stem}.csv"), what.to_string()]);
        Ok(())
    }
}

pub fn write_report(run: &Run, table: &MetricTable) -> Result<()> {
    let a = compute(run, table)?;
    let mut fig = Figures {
        dir: run.path("report"),
        index: Vec::new(),
    };
    let levels = run.cfg.levels();

    // mean +- SD tables, methods x n
    for &metric in &run.cfg.metrics {
        let mut header = vec!["method".to_string()];
        header.extend(levels.iter().map(|n| format!("n={n}")));
        let rows: Vec<Vec<String>> = run
            .cfg
            .methods
            .iter()
            .map(|&m| {
                let mut row = vec![m.to_string()];
                for &n in &levels {
                    let cell = a
                        .summaries
                        .iter()
                        .find(|s| s.method == m && s.n == n && s.metric == metric)
                        .map(|s| format!("{:.4} ± {:.4}", s.mean, s.sd))
                        .unwrap_or_else(|| "-".into());
                    row.push(cell);
                }
                row
            })
            .collect();
        let h: Vec<&str> = header.iter().map(String::as_str).collect();
        fig.table(
            &format!("table_{metric}"),
            &format!("mean ± SD of {metric} across realizations"),
            &h,
            &rows,
        )?;
    }

    // variance vs n, log-log
    for &metric in &run.cfg.metrics {
        let fits: Vec<&PowerLawFit> = a.power.iter().filter(|p| p.metric == metric).collect();
        if fits.is_empty() {
            continue;
        }
        let mut rows = Vec::new();
        let series = fits
            .iter()
            .map(|p| {
                for (n, v) in &p.levels {
                    rows.push(vec![
                        p.method.to_string(),
                        n.to_string(),
                        v.to_string(),
                        p.alpha.to_string(),
                    ]);
                }
                Series::new(
                    format!("{} (α={:.2})", p.method, p.alpha),
                    p.levels.iter().map(|(n, v)| (*n as f64, *v)).collect(),
                )
            })
            .collect();
        let chart = LineChart {
            title: format!("Variance of {metric} across realizations"),
            x_label: "training size n".into(),
            y_label: format!("Var[{metric}]"),
            log_x: true,
            log_y: true,
            series,
            ..Default::default()
        };
        fig.emit(
            &format!("variance_{metric}"),
            "empirical variance vs n with power-law exponents",
            &chart.render(),
            &["method", "n", "variance", "alpha"],
            &rows,
        )?;
    }

    // convergence rates
    {
        let mut rows = Vec::new();
        let mut series = Vec::new();
        for &m in &run.cfg.methods {
            let pts: Vec<(f64, f64)> = levels
                .iter()
                .filter_map(|&n| a.rates.get(&(m, n)).map(|r| (n as f64, *r)))
                .collect();
            for (n, r) in &pts {
                rows.push(vec![m.to_string(), n.to_string(), r.to_string()]);
            }
            series.push(Series::new(m.to_string(), pts));
        }
        let chart = LineChart {
            title: "Training convergence rate".into(),
            x_label: "training size n".into(),
            y_label: "converged fraction".into(),
            log_x: true,
            series,
            hlines: vec![uqbench_core::table::MIN_CONVERGENCE_RATE],
            y_range: Some((0.0, 1.05)),
            ..Default::default()
        };
        fig.emit(
            "convergence",
            "fraction of realizations that trained successfully",
            &chart.render(),
            &["method", "n", "rate"],
            &rows,
        )?;
    }

    let (fa, fb) = run.cfg.focus;
    let (la, lb) = (fa.to_string(), fb.to_string());
    for (metric, cmps) in &a.comparisons {
        // P(A < B) vs n for the focus pair
        let pts: Vec<(f64, f64)> = cmps
            .iter()
            .filter_map(|c| c.prob(&la, &lb).map(|p| (c.n as f64, p)))
            .collect();
        if !pts.is_empty() {
            let rows: Vec<Vec<String>> = pts
                .iter()
                .map(|(n, p)| vec![n.to_string(), p.to_string(), conclusive(*p).to_string()])
                .collect();
            let chart = LineChart {
                title: format!("P({la} ≺ {lb}) on {metric}"),
                x_label: "training size n".into(),
                y_label: "posterior probability".into(),
                log_x: true,
                series: vec![Series::new(format!("P({la} ≺ {lb})"), pts)],
                hlines: vec![CONCLUSIVE_LOW, CONCLUSIVE_HIGH],
                y_range: Some((0.0, 1.0)),
                ..Default::default()
            };
            fig.emit(
                &format!("prob_{la}_{lb}_{metric}"),
                "posterior ranking probability vs n",
                &chart.render(),
                &["n", "p_a_better", "conclusive"],
                &rows,
            )?;
        }
        // pairwise heatmaps
        for c in cmps {
            let cells: Vec<Vec<Option<f64>>> = c
                .labels
                .iter()
                .map(|x| c.labels.iter().map(|y| c.prob(x, y)).collect())
                .collect();
            let mut header = vec!["method".to_string()];
            header.extend(c.labels.iter().cloned());
            let h: Vec<&str> = header.iter().map(String::as_str).collect();
            let rows: Vec<Vec<String>> = c
                .labels
                .iter()
                .zip(&cells)
                .map(|(l, row)| {
                    let mut v = vec![l.clone()];
                    v.extend(row.iter().map(|p| opt(*p)));
                    v
                })
                .collect();
            fig.emit(
                &format!("heatmap_{metric}_n{}", c.n),
                "pairwise P(row ≺ column)",
                &heatmap(
                    &format!("P(row ≺ column), {metric}, n={}", c.n),
                    &c.labels,
                    &cells,
                ),
                &h,
                &rows,
            )?;
        }
    }

    for (metric, curve) in &a.mdd {
        let (svg, rows) = mdd_figure(curve);
        fig.emit(
            &format!("mdd_{}_{}_{metric}", curve.a, curve.b),
            "MDD and observed gap vs n; shaded n are undetectable",
            &svg,
            &MDD_HEADER,
            &rows,
        )?;
    }

    for r in a.records.iter().filter(|r| r.is_fitted() && r.passed) {
        let Some(ppc) = run.load_ppc(r.metric, r.n)? else {
            continue;
        };
        let mut rows = Vec::new();
        let (mut obs, mut lo, mut mid, mut hi) = (vec![], vec![], vec![], vec![]);
        for (q, level) in PPC_QUANTILES.iter().enumerate() {
            let mut rep: Vec<f64> = ppc.replicates.iter().map(|s| s.quantiles[q]).collect();
            rep.sort_by(f64::total_cmp);
            let pick = |p: f64| uqbench_core::stats::quantile_sorted(&rep, p);
            let (l, m, h) = (pick(0.025), pick(0.5), pick(0.975));
            let o = ppc.observed.quantiles[q];
            rows.push(vec![
                level.to_string(),
                o.to_string(),
                l.to_string(),
                m.to_string(),
                h.to_string(),
            ]);
            obs.push((*level, o));
            lo.push((*level, l));
            mid.push((*level, m));
            hi.push((*level, h));
        }
        let chart = LineChart {
            title: format!(
                "Posterior predictive check, {} n={} (tail p = {:.2})",
                r.metric, r.n, ppc.tail_p_value
            ),
            x_label: "quantile level".into(),
            y_label: r.metric.to_string(),
            series: vec![
                Series::new("observed", obs),
                Series::new("replicate median", mid),
                Series::new("replicate 2.5%", lo).dashed(),
                Series::new("replicate 97.5%", hi).dashed(),
            ],
            ..Default::default()
        };
        fig.emit(
            &format!("ppc_{}_n{}", r.metric, r.n),
            "observed quantiles against replicated-data quantile bands",
            &chart.render(),
            &["quantile", "observed", "rep_lo", "rep_median", "rep_hi"],
            &rows,
        )?;
    }

    let index = std::mem::take(&mut fig.index);
    fig.table(
        "index",
        "files in this report",
        &["svg", "csv", "content"],
        &index,
    )?;
    Ok(())
}

pub fn conclusive(p: f64) -> bool {
    p <= CONCLUSIVE_LOW || p >= CONCLUSIVE_HIGH
}

pub const MDD_HEADER: [&str; 6] = [
    "n",
    "gamma",
    "mdd",
    "observed_gap",
    "detect_prob",
    "detectable",
];

/// MDD chart with undetectable n shaded, plus its data rows.
pub fn mdd_figure(curve: &MddCurve) -> (String, Vec<Vec<String>>) {
    let pts = &curve.points;
    let rows = pts
        .iter()
        .map(|p| {
            vec![
                p.n.to_string(),
                p.gamma.to_string(),
                p.mdd.to_string(),
                p.observed_gap.to_string(),
                p.detect_prob.to_string(),
                p.detectable().to_string(),
            ]
        })
        .collect();
    let ns: Vec<f64> = pts.iter().map(|p| p.n as f64).collect();
    let mut shade = Vec::new();
    for (k, p) in pts.iter().enumerate() {
        if p.detectable() {
            continue;
        }
        let left = if k > 0 {
            (ns[k - 1] * ns[k]).sqrt()
        } else {
            ns[k] / 1.2
        };
        let right = if k + 1 < ns.len() {
            (ns[k] * ns[k + 1]).sqrt()
        } else {
            ns[k] * 1.2
        };
        shade.push((left, right));
    }
    let gamma = pts.first().map(|p| p.gamma).unwrap_or(0.8);
    let chart = LineChart {
        title: format!(
            "MDD({gamma}) for {} vs {} on {}",
            curve.a, curve.b, curve.metric
        ),
        x_label: "training size n".into(),
        y_label: format!("{} difference", curve.metric),
        log_x: true,
        series: vec![
            Series::new("MDD", pts.iter().map(|p| (p.n as f64, p.mdd)).collect()),
            Series::new(
                "observed gap",
                pts.iter().map(|p| (p.n as f64, p.observed_gap)).collect(),
            )
            .dashed(),
        ],
        shade,
        ..Default::default()
    };
    (chart.render(), rows)
}
