//! The compare, mdd and diagnose subcommands over an existing run.

use std::fmt::Write as _;

use anyhow::{bail, Result};
use uqbench_core::analysis::{mdd, rank_probability, MddCurve, VarianceMode};
use uqbench_core::{MethodId, MetricId};

use crate::pipeline::{write_atomic, Run};
use crate::report::{conclusive, csv_bytes, fit_status, mdd_figure, MDD_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Conclusive,
    Inconclusive,
    /// The fit failed diagnostics, so no probability is reported.
    Unconverged,
    /// One of the methods was not part of the fit at this n.
    Absent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub n: usize,
    pub prob: Option<f64>,
    pub verdict: Verdict,
}

fn check_pair(a: MethodId, b: MethodId) -> Result<()> {
    if a == b {
        bail!("cannot compare {a} with itself");
    }
    Ok(())
}

/// P(A ≺ B) on `metric` at every n level of the run. Writes
/// `analysis/compare_{metric}_{A}_{B}.csv`.
pub fn compare(run: &Run, metric: MetricId, a: MethodId, b: MethodId) -> Result<Vec<CompareRow>> {
    check_pair(a, b)?;
    let mut rows = Vec::new();
    for n in run.cfg.levels() {
        let loaded = run.load_fit(metric, n)?;
        let labels = loaded.record.labels();
        let (la, lb) = (a.to_string(), b.to_string());
        let row = if !labels.contains(&la) || !labels.contains(&lb) {
            CompareRow {
                n,
                prob: None,
                verdict: Verdict::Absent,
            }
        } else if let Ok(post) = loaded.fit.clone().converged() {
            let p = rank_probability(&post, &la, &lb)?;
            CompareRow {
                n,
                prob: Some(p),
                verdict: if conclusive(p) {
                    Verdict::Conclusive
                } else {
                    Verdict::Inconclusive
                },
            }
        } else {
            CompareRow {
                n,
                prob: None,
                verdict: Verdict::Unconverged,
            }
        };
        rows.push(row);
    }
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.n.to_string(),
                r.prob.map(|p| p.to_string()).unwrap_or_default(),
                format!("{:?}", r.verdict).to_lowercase(),
            ]
        })
        .collect();
    write_atomic(
        &run.path(&format!("analysis/compare_{metric}_{a}_{b}.csv")),
        &csv_bytes(&["n", "p_a_better", "verdict"], &csv_rows)?,
    )?;
    Ok(rows)
}

/// Fixed-width table; inconclusive probabilities carry a `?` marker.
pub fn render_compare(metric: MetricId, a: MethodId, b: MethodId, rows: &[CompareRow]) -> String {
    let mut s = format!("P({a} ≺ {b}) on {metric}\n{:>6}  {:>9}\n", "n", "P");
    for r in rows {
        let cell = match (r.prob, r.verdict) {
            (Some(p), Verdict::Conclusive) => format!("{p:>7.3}  "),
            (Some(p), _) => format!("{p:>7.3} ?"),
            (None, Verdict::Unconverged) => format!("{:>9}", "unconv."),
            (None, _) => format!("{:>9}", "-"),
        };
        let _ = writeln!(s, "{:>6}  {cell}", r.n);
    }
    s.push_str("? = inconclusive (0.05 < P < 0.95)\n");
    s
}

/// Predictive MDD curve over the converged fits. Writes a CSV and an SVG
/// into `report/`.
pub fn mdd_curve(
    run: &Run,
    metric: MetricId,
    a: MethodId,
    b: MethodId,
    gamma: f64,
    mode: VarianceMode,
) -> Result<MddCurve> {
    check_pair(a, b)?;
    let (la, lb) = (a.to_string(), b.to_string());
    let mut points = Vec::new();
    for n in run.cfg.levels() {
        let loaded = run.load_fit(metric, n)?;
        let Ok(post) = loaded.fit.clone().converged() else {
            continue;
        };
        if post.labels().contains(&la) && post.labels().contains(&lb) {
            points.push(mdd(&post, &la, &lb, gamma, n, mode)?);
        }
    }
    let curve = MddCurve {
        metric,
        a: la,
        b: lb,
        points,
    };
    let stem = format!("report/mdd_{a}_{b}_{metric}_g{gamma}");
    let (svg, rows) = mdd_figure(&curve);
    write_atomic(&run.path(&format!("{stem}.svg")), svg.as_bytes())?;
    write_atomic(
        &run.path(&format!("{stem}.csv")),
        &csv_bytes(&MDD_HEADER, &rows)?,
    )?;
    Ok(curve)
}

pub fn render_mdd(curve: &MddCurve) -> String {
    let mut s = format!(
        "MDD for {} vs {} on {}\n{:>6}  {:>10}  {:>10}  {:>8}  detectable\n",
        curve.a, curve.b, curve.metric, "n", "MDD", "gap", "P(det)"
    );
    for p in &curve.points {
        let _ = writeln!(
            s,
            "{:>6}  {:>10.5}  {:>10.5}  {:>8.3}  {}",
            p.n,
            p.mdd,
            p.observed_gap,
            p.detect_prob,
            if p.detectable() { "yes" } else { "no" }
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagRow {
    pub n: usize,
    pub metric: MetricId,
    pub max_rhat: f64,
    pub min_ess: f64,
    pub status: &'static str,
    pub ppc_tail_p: Option<f64>,
    pub ppc_quantiles_in_band: Option<usize>,
}

impl DiagRow {
    pub fn passed(&self) -> bool {
        self.status != "fail"
    }
}

/// One row per fitted (metric, n) cell.
pub fn diagnose(run: &Run) -> Result<Vec<DiagRow>> {
    let records = run.fit_records()?;
    if records.is_empty() {
        bail!(
            "no fits in {}; run `uqbench run` to complete the fit stage",
            run.dir.display()
        );
    }
    let mut out = Vec::new();
    for r in &records {
        let ppc = run.load_ppc(r.metric, r.n)?;
        out.push(DiagRow {
            n: r.n,
            metric: r.metric,
            max_rhat: r.max_rhat,
            min_ess: r.min_ess,
            status: fit_status(r),
            ppc_tail_p: ppc.as_ref().map(|p| p.tail_p_value),
            ppc_quantiles_in_band: ppc.as_ref().map(|p| p.quantiles_in_band(0.95)),
        });
    }
    let rows: Vec<Vec<String>> = out
        .iter()
        .map(|d| {
            vec![
                d.n.to_string(),
                d.metric.to_string(),
                d.max_rhat.to_string(),
                d.min_ess.to_string(),
                d.ppc_tail_p.map(|p| p.to_string()).unwrap_or_default(),
                d.ppc_quantiles_in_band
                    .map(|q| q.to_string())
                    .unwrap_or_default(),
                d.status.to_string(),
            ]
        })
        .collect();
    write_atomic(
        &run.path("analysis/diagnostics.csv"),
        &csv_bytes(
            &[
                "n",
                "metric",
                "max_rhat",
                "min_ess",
                "ppc_tail_p",
                "ppc_quantiles_in_band",
                "status",
            ],
            &rows,
        )?,
    )?;
    Ok(out)
}

pub fn render_diagnose(rows: &[DiagRow]) -> String {
    let mut s = format!(
        "{:<14} {:>5}  {:>8}  {:>7}  {:>7}  {:>5}  status\n",
        "metric", "n", "max R̂", "min ESS", "tail p", "q-in"
    );
    for d in rows {
        let _ = writeln!(
            s,
            "{:<14} {:>5}  {:>8.4}  {:>7.0}  {:>7}  {:>5}  {}",
            d.metric.to_string(),
            d.n,
            d.max_rhat,
            d.min_ess,
            d.ppc_tail_p
                .map(|p| format!("{p:.2}"))
                .unwrap_or_else(|| "-".into()),
            d.ppc_quantiles_in_band
                .map(|q| format!("{q}/5"))
                .unwrap_or_else(|| "-".into()),
            d.status
        );
    }
    s
}
