//! The metric table: one observation per (method, realization, n, metric).

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{MethodId, MetricId};

/// Methods whose convergence rate at a training size falls below this are
/// dropped from hierarchical fits.
pub const MIN_CONVERGENCE_RATE: f64 = 0.80;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub method: MethodId,
    pub realization: usize,
    pub n: usize,
}

impl CellKey {
    pub fn new(method: MethodId, realization: usize, n: usize) -> Self {
        Self {
            method,
            realization,
            n,
        }
    }

    pub fn metric(self, metric: MetricId) -> MetricKey {
        MetricKey {
            method: self.method,
            realization: self.realization,
            n: self.n,
            metric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MetricKey {
    pub method: MethodId,
    pub realization: usize,
    pub n: usize,
    pub metric: MetricId,
}

impl MetricKey {
    pub fn cell(self) -> CellKey {
        CellKey::new(self.method, self.realization, self.n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoveredCount {
    pub covered: u64,
    pub n_test: u64,
}

impl CoveredCount {
    pub fn new(covered: u64, n_test: u64) -> Result<Self> {
        if n_test == 0 || covered > n_test {
            return Err(Error::InvalidCount { covered, n_test });
        }
        Ok(Self { covered, n_test })
    }

    pub fn fraction(self) -> f64 {
        self.covered as f64 / self.n_test as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricTable {
    entries: BTreeMap<MetricKey, f64>,
    counts: BTreeMap<CellKey, CoveredCount>,
    converged: BTreeMap<CellKey, bool>,
}

/// Rectangular (method x realization) slice ready for a hierarchical fit.
#[derive(Debug, Clone, PartialEq)]
pub struct BhmMatrix {
    pub n: usize,
    pub metric: MetricId,
    pub methods: Vec<MethodId>,
    pub realizations: Vec<usize>,
    /// `values[[m, i]]`
    pub values: Array2<f64>,
    /// Covered counts for PICP slices.
    pub counts: Option<Array2<u64>>,
    pub n_test: Option<u64>,
    pub excluded_methods: Vec<MethodId>,
}

impl MetricTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.converged.is_empty()
    }

    /// Add one observation. Duplicate keys are rejected.
    pub fn insert(&mut self, key: MetricKey, value: f64) -> Result<()> {
        if key.metric == MetricId::Picp {
            return Err(Error::invalid(
                "PICP must be stored through insert_coverage so the counts are kept",
            ));
        }
        self.insert_raw(key, value)
    }

    fn insert_raw(&mut self, key: MetricKey, value: f64) -> Result<()> {
        if self.entries.contains_key(&key) {
            return Err(Error::DuplicateEntry {
                method: key.method,
                realization: key.realization,
                n: key.n,
                metric: key.metric,
            });
        }
        self.entries.insert(key, value);
        self.converged.entry(key.cell()).or_insert(true);
        Ok(())
    }

    /// Store PICP as a count; the fraction entry is derived from it.
    pub fn insert_coverage(&mut self, cell: CellKey, count: CoveredCount) -> Result<()> {
        self.insert_raw(cell.metric(MetricId::Picp), count.fraction())?;
        self.counts.insert(cell, count);
        Ok(())
    }

    pub fn set_converged(&mut self, cell: CellKey, converged: bool) {
        self.converged.insert(cell, converged);
    }

    pub fn get(&self, key: &MetricKey) -> Option<f64> {
        self.entries.get(key).copied()
    }

    pub fn coverage(&self, cell: &CellKey) -> Option<CoveredCount> {
        self.counts.get(cell).copied()
    }

    pub fn is_converged(&self, cell: &CellKey) -> Option<bool> {
        self.converged.get(cell).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&MetricKey, &f64)> {
        self.entries.iter()
    }

    pub fn cells(&self) -> impl Iterator<Item = (&CellKey, &bool)> {
        self.converged.iter()
    }

    pub fn methods(&self) -> BTreeSet<MethodId> {
        self.converged.keys().map(|c| c.method).collect()
    }

    pub fn n_levels(&self) -> BTreeSet<usize> {
        self.converged.keys().map(|c| c.n).collect()
    }

    pub fn metrics(&self) -> BTreeSet<MetricId> {
        self.entries.keys().map(|k| k.metric).collect()
    }

    /// Merge another (disjoint) table into this one.
    pub fn merge(&mut self, other: MetricTable) -> Result<()> {
        for (key, value) in other.entries {
            if key.metric == MetricId::Picp {
                continue;
            }
            self.insert_raw(key, value)?;
        }
        for (cell, count) in other.counts {
            self.insert_coverage(cell, count)?;
        }
        for (cell, flag) in other.converged {
            let slot = self.converged.entry(cell).or_insert(flag);
            *slot = *slot && flag;
        }
        Ok(())
    }

    /// Values for one (n, metric) slice: method -> realization -> value.
    pub fn slice(&self, n: usize, metric: MetricId) -> BTreeMap<MethodId, BTreeMap<usize, f64>> {
        let mut out: BTreeMap<MethodId, BTreeMap<usize, f64>> = BTreeMap::new();
        for (k, v) in &self.entries {
            if k.n == n && k.metric == metric && self.converged.get(&k.cell()) == Some(&true) {
                out.entry(k.method).or_default().insert(k.realization, *v);
            }
        }
        out
    }

    /// Fraction of realizations at `n` where `method` converged. `None` when
    /// the cell was never run.
    pub fn convergence_rate(&self, method: MethodId, n: usize) -> Option<f64> {
        let flags: Vec<bool> = self
            .converged
            .iter()
            .filter(|(c, _)| c.method == method && c.n == n)
            .map(|(_, f)| *f)
            .collect();
        if flags.is_empty() {
            return None;
        }
        Some(flags.iter().filter(|f| **f).count() as f64 / flags.len() as f64)
    }

    /// Build the complete method x realization matrix for a hierarchical fit.
    ///
    /// With `exclude_unconverged`, methods converging in fewer than 80% of
    /// realizations are dropped. Realizations missing any remaining method
    /// are then dropped row-wise so every retained realization is paired
    /// across all retained methods.
    pub fn slice_for_bhm(
        &self,
        n: usize,
        metric: MetricId,
        exclude_unconverged: bool,
    ) -> Result<BhmMatrix> {
        let slice = self.slice(n, metric);
        let mut methods = Vec::new();
        let mut excluded = Vec::new();
        for method in self.methods() {
            let Some(rate) = self.convergence_rate(method, n) else {
                continue;
            };
            if exclude_unconverged && rate < MIN_CONVERGENCE_RATE {
                excluded.push(method);
                continue;
            }
            if slice.contains_key(&method) {
                methods.push(method);
            }
        }

        let realizations: Vec<usize> = match methods.first() {
            None => Vec::new(),
            Some(first) => slice[first]
                .keys()
                .copied()
                .filter(|r| methods.iter().all(|m| slice[m].contains_key(r)))
                .collect(),
        };

        if methods.len() < 2 || realizations.len() < 2 {
            return Err(Error::InsufficientData {
                n,
                metric,
                methods: methods.len(),
                realizations: realizations.len(),
            });
        }

        let values = Array2::from_shape_fn((methods.len(), realizations.len()), |(m, i)| {
            slice[&methods[m]][&realizations[i]]
        });

        let (counts, n_test) = if metric == MetricId::Picp {
            let mut n_test = None;
            let mut counts = Array2::zeros((methods.len(), realizations.len()));
            for (m, method) in methods.iter().enumerate() {
                for (i, r) in realizations.iter().enumerate() {
                    let c = self.counts[&CellKey::new(*method, *r, n)];
                    match n_test {
                        None => n_test = Some(c.n_test),
                        Some(t) if t != c.n_test => {
                            return Err(Error::invalid(format!(
                                "inconsistent test sizes {t} and {} in PICP slice",
                                c.n_test
                            )))
                        }
                        _ => {}
                    }
                    counts[[m, i]] = c.covered;
                }
            }
            (Some(counts), n_test)
        } else {
            (None, None)
        };

        Ok(BhmMatrix {
            n,
            metric,
            methods,
            realizations,
            values,
            counts,
            n_test,
            excluded_methods: excluded,
        })
    }

    /// CSV columns: method, realization, n, metric, value, converged,
    /// covered, n_test. Failed cells appear as a single row with empty
    /// metric and value fields.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "method",
            "realization",
            "n",
            "metric",
            "value",
            "converged",
            "covered",
            "n_test",
        ])?;
        for (cell, converged) in &self.converged {
            let mut wrote = false;
            for metric in MetricId::ALL {
                let Some(value) = self.entries.get(&cell.metric(metric)) else {
                    continue;
                };
                let (covered, n_test) = match (metric, self.counts.get(cell)) {
                    (MetricId::Picp, Some(c)) => (c.covered.to_string(), c.n_test.to_string()),
                    _ => (String::new(), String::new()),
                };
                w.write_record([
                    cell.method.as_str().to_string(),
                    cell.realization.to_string(),
                    cell.n.to_string(),
                    metric.as_str().to_string(),
                    value.to_string(),
                    converged.to_string(),
                    covered,
                    n_test,
                ])?;
                wrote = true;
            }
            if !wrote {
                w.write_record([
                    cell.method.as_str(),
                    &cell.realization.to_string(),
                    &cell.n.to_string(),
                    "",
                    "",
                    &converged.to_string(),
                    "",
                    "",
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<metric table>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut table = MetricTable::new();
        let mut rdr = csv::Reader::from_reader(reader);
        for (idx, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = idx + 2;
            let field = |i: usize, name: &str| -> Result<&str> {
                rec.get(i).ok_or_else(|| Error::Parse {
                    row,
                    column: name.into(),
                    message: "missing field".into(),
                })
            };
            let parse_err = |name: &str, msg: String| Error::Parse {
                row,
                column: name.into(),
                message: msg,
            };
            let method: MethodId = field(0, "method")?
                .parse()
                .map_err(|e: Error| parse_err("method", e.to_string()))?;
            let realization: usize = field(1, "realization")?
                .parse()
                .map_err(|e: std::num::ParseIntError| parse_err("realization", e.to_string()))?;
            let n: usize = field(2, "n")?
                .parse()
                .map_err(|e: std::num::ParseIntError| parse_err("n", e.to_string()))?;
            let converged: bool = field(5, "converged")?
                .parse()
                .map_err(|e: std::str::ParseBoolError| parse_err("converged", e.to_string()))?;
            let cell = CellKey::new(method, realization, n);
            let metric_field = field(3, "metric")?;
            if !metric_field.is_empty() {
                let metric: MetricId = metric_field
                    .parse()
                    .map_err(|e: Error| parse_err("metric", e.to_string()))?;
                if metric == MetricId::Picp {
                    let covered: u64 =
                        field(6, "covered")?
                            .parse()
                            .map_err(|e: std::num::ParseIntError| {
                                parse_err("covered", e.to_string())
                            })?;
                    let n_test: u64 = field(7, "n_test")?
                        .parse()
                        .map_err(|e: std::num::ParseIntError| parse_err("n_test", e.to_string()))?;
                    table.insert_coverage(cell, CoveredCount::new(covered, n_test)?)?;
                } else {
                    let value: f64 =
                        field(4, "value")?
                            .parse()
                            .map_err(|e: std::num::ParseFloatError| {
                                parse_err("value", e.to_string())
                            })?;
                    table.insert(cell.metric(metric), value)?;
                }
            }
            table.set_converged(cell, converged);
        }
        Ok(table)
    }
}
