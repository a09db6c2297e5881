//! Staged, resumable experiment runs.
//!
//! Layout of a run directory (named by the config hash):
//!
//! ```text
//! manifest.json
//! dataset.json
//! cells/n{n}/{method}_r{r}.csv     one trained cell each
//! metrics.csv                      merged metric table
//! fits/{metric}_n{n}/              meta.json, input.csv, draws.csv,
//!                                  diagnostics.json, ppc.json
//! analysis/                        CSV tables
//! report/                          SVG figures with sibling CSVs
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{anyhow, bail, Context, Result};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use uqbench_core::datagen::{
    draw_realizations, feasible_levels, generate_synthetic, load_csv_dataset, max_training_size,
    DataView, Dataset, STANDARD_N_LEVELS,
};
use uqbench_core::hier::{
    fit_beta_binomial, fit_gaussian, posterior_predictive_check, BetaBinomSpec, ConvergedPosterior,
    Diagnostics, Fit, GaussianBhmSpec, ModelKind, PosteriorSamples, PpcSummary,
};
use uqbench_core::manifest::{RunManifest, StageStatus};
use uqbench_core::methods::train;
use uqbench_core::scoring::{evaluate, ScoringConfig};
use uqbench_core::table::BhmMatrix;
use uqbench_core::{CellKey, Error as CoreError, MethodId, MetricId, MetricTable, RngStream};

use crate::config::{DatasetSpec, ExperimentConfig};

pub const GENERATE: &str = "generate";
pub const TRAIN: &str = "train";
pub const FIT: &str = "fit";
pub const ANALYZE: &str = "analyze";
pub const REPORT: &str = "report";
pub const STAGES: [&str; 5] = [GENERATE, TRAIN, FIT, ANALYZE, REPORT];

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FILE: &str = "dataset.json";
pub const METRICS_FILE: &str = "metrics.csv";

/// Write through a temporary sibling so interrupted runs never leave a
/// truncated artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Outcome of one hierarchical fit cell, persisted as `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub config_hash: String,
    pub n: usize,
    pub metric: MetricId,
    pub model: ModelKind,
    pub methods: Vec<MethodId>,
    pub realizations: Vec<usize>,
    pub excluded: Vec<MethodId>,
    pub n_test: Option<u64>,
    pub seed: u64,
    pub max_rhat: f64,
    pub min_ess: f64,
    pub passed: bool,
    /// Set when the slice could not be fitted at all.
    pub skipped: Option<String>,
}

impl FitRecord {
    pub fn dir_name(metric: MetricId, n: usize) -> String {
        format!("{metric}_n{n}")
    }

    pub fn is_fitted(&self) -> bool {
        self.skipped.is_none()
    }

    pub fn labels(&self) -> Vec<String> {
        self.methods.iter().map(|m| m.to_string()).collect()
    }
}

/// A fit loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedFit {
    pub record: FitRecord,
    pub fit: Fit,
}

impl LoadedFit {
    pub fn posterior(&self) -> Result<ConvergedPosterior> {
        self.fit.clone().converged().map_err(|e| {
            anyhow!(
                "{} fit at n={} failed diagnostics: {e}",
                self.record.metric,
                self.record.n
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub cells: usize,
    pub unconverged_cells: usize,
    pub failed_fits: Vec<(MetricId, usize)>,
}

pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    workers: Option<usize>,
}

fn dataset_id(cfg: &ExperimentConfig) -> String {
    match &cfg.dataset {
        DatasetSpec::Synthetic => "synthetic".into(),
        DatasetSpec::Csv { path, .. } => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "csv".into()),
    }
}

impl Run {
    /// Open or create the run directory `out_root/<config hash>`.
    pub fn create(out_root: &Path, cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        let dir = out_root.join(&hash);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mpath = dir.join(MANIFEST_FILE);
        let manifest = if mpath.exists() {
            let m = RunManifest::load(&mpath)?;
            if m.config_hash != hash {
                bail!(
                    "{} belongs to config {}, not {hash}",
                    mpath.display(),
                    m.config_hash
                );
            }
            m
        } else {
            let mut m = RunManifest::new(
                hash,
                dataset_id(&cfg),
                cfg.levels(),
                cfg.realizations,
                cfg.to_json(),
            );
            m.seeds.insert("global".into(), cfg.global_seed);
            m.save(&mpath)?;
            m
        };
        Ok(Self {
            cfg,
            dir,
            manifest,
            workers: None,
        })
    }

    /// Reopen an existing run from its directory or manifest path.
    pub fn open(path: &Path) -> Result<Self> {
        let mpath = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let manifest = RunManifest::load(&mpath)
            .with_context(|| format!("no run manifest at {}", mpath.display()))?;
        let cfg: ExperimentConfig = serde_json::from_value(manifest.config.clone())
            .context("manifest holds an unreadable config")?;
        if cfg.hash() != manifest.config_hash {
            bail!("manifest config does not match its hash");
        }
        let dir = mpath
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Self {
            cfg,
            dir,
            manifest,
            workers: None,
        })
    }

    pub fn with_workers(mut self, workers: Option<usize>) -> Self {
        self.workers = workers;
        self
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn save_manifest(&self) -> Result<()> {
        self.manifest.save(&self.path(MANIFEST_FILE))?;
        Ok(())
    }

    fn start(&mut self, stage: &str) -> Result<()> {
        self.manifest.record(stage, StageStatus::Started, None);
        self.save_manifest()
    }

    fn finish(&mut self, stage: &str, artifact: &str, note: Option<String>) -> Result<()> {
        self.manifest.add_artifact(stage, artifact)?;
        self.manifest.record(stage, StageStatus::Completed, note);
        self.save_manifest()
    }

    fn fail(&mut self, stage: &str, err: &anyhow::Error) {
        self.manifest
            .record(stage, StageStatus::Failed, Some(format!("{err:#}")));
        let _ = self.save_manifest();
    }

    /// A stage is done when the manifest says so and its artifact exists.
    pub fn stage_done(&self, stage: &str) -> bool {
        self.manifest.is_completed(stage)
            && self
                .manifest
                .artifact_paths
                .get(stage)
                .is_some_and(|p| self.path(p).exists())
    }

    fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        match self.workers {
            None => Ok(f()),
            Some(w) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(w.max(1))
                    .build()
                    .context("building worker pool")?;
                Ok(pool.install(f))
            }
        }
    }

    /// Run every stage, resuming from whatever is already on disk.
    pub fn execute(&mut self) -> Result<RunSummary> {
        let ds = self.generate()?;
        let table = self.train(&ds)?;
        let fits = self.fit(&table)?;
        self.analyze(&table)?;
        self.report(&table)?;
        let failed_fits = fits
            .iter()
            .filter(|r| r.is_fitted() && !r.passed)
            .map(|r| (r.metric, r.n))
            .collect();
        Ok(RunSummary {
            dir: self.dir.clone(),
            cells: table.cells().count(),
            unconverged_cells: table.cells().filter(|(_, ok)| !**ok).count(),
            failed_fits,
        })
    }

    pub fn generate(&mut self) -> Result<Dataset> {
        let path = self.path(DATASET_FILE);
        if self.stage_done(GENERATE) {
            return Ok(Dataset::load_json(&path)?);
        }
        self.start(GENERATE)?;
        let res =
            (|| -> Result<Dataset> {
                let ds = match &self.cfg.dataset {
                    DatasetSpec::Synthetic => generate_synthetic(self.cfg.global_seed),
                    DatasetSpec::Csv {
                        path,
                        target,
                        test_fraction,
                    } => load_csv_dataset(path, target, *test_fraction, self.cfg.global_seed)?,
                };
                let cap = max_training_size(ds.pool_size(), self.cfg.max_pool_fraction);
                if let Some(bad) = self.cfg.n_levels.iter().find(|&&n| n > cap) {
                    bail!(
                    "n={bad} exceeds the training pool of {} rows; feasible standard levels: {:?}",
                    ds.pool_size(),
                    feasible_levels(ds.pool_size(), &STANDARD_N_LEVELS, self.cfg.max_pool_fraction)
                );
                }
                ds.save_json(&path)?;
                Ok(ds)
            })();
        match res {
            Ok(ds) => {
                self.manifest.dataset_id = format!("{}:{:016x}", ds.id, ds.test_digest());
                self.finish(GENERATE, DATASET_FILE, None)?;
                Ok(ds)
            }
            Err(e) => {
                self.fail(GENERATE, &e);
                Err(e)
            }
        }
    }

    fn cell_path(&self, n: usize, method: MethodId, r: usize) -> PathBuf {
        self.path(&format!("cells/n{n}/{method}_r{r}.csv"))
    }

    pub fn load_table(&self) -> Result<MetricTable> {
        let path = self.path(METRICS_FILE);
        let f = fs::File::open(&path)
            .with_context(|| format!("{} missing; run the train stage", path.display()))?;
        Ok(MetricTable::read_csv(f)?)
    }

    /// Train and score every (method, n, realization) cell. Cells already on
    /// disk are reused.
    pub fn train(&mut self, ds: &Dataset) -> Result<MetricTable> {
        if self.stage_done(TRAIN) {
            return self.load_table();
        }
        self.start(TRAIN)?;
        let res = self.train_cells(ds);
        match res {
            Ok((table, note)) => {
                let mut buf = Vec::new();
                table.write_csv(&mut buf)?;
                write_atomic(&self.path(METRICS_FILE), &buf)?;
                self.finish(TRAIN, METRICS_FILE, Some(note))?;
                Ok(table)
            }
            Err(e) => {
                self.fail(TRAIN, &e);
                Err(e)
            }
        }
    }

    fn train_cells(&mut self, ds: &Dataset) -> Result<(MetricTable, String)> {
        let cfg = self.cfg.clone();
        let test_x = ds.test_x();
        let test_y = ds.test_y().to_vec();
        let mut jobs = Vec::new();
        for n in cfg.levels() {
            let reals = draw_realizations(
                ds,
                n,
                cfg.realizations,
                cfg.global_seed,
                cfg.seed_mode,
                cfg.max_pool_fraction,
            )?;
            for real in reals {
                self.manifest
                    .seeds
                    .insert(format!("realization/n{n}/r{}", real.r), real.seed);
                for &m in &cfg.methods {
                    jobs.push((m, real.clone()));
                }
            }
        }
        self.save_manifest()?;
        let total = jobs.len();
        let done = AtomicUsize::new(0);
        let this = &*self;
        let outcome: Vec<Result<()>> = self.in_pool(|| {
            jobs.par_iter()
                .map(|(m, real)| {
                    let path = this.cell_path(real.n, *m, real.r);
                    if !path.exists() {
                        let t = train_cell(ds, &test_x, &test_y, *m, real, &cfg)?;
                        let mut buf = Vec::new();
                        t.write_csv(&mut buf)?;
                        write_atomic(&path, &buf)?;
                    }
                    let k = done.fetch_add(1, Ordering::Relaxed) + 1;
                    if k % 50 == 0 || k == total {
                        eprintln!("trained {k}/{total} cells");
                    }
                    Ok(())
                })
                .collect()
        })?;
        outcome.into_iter().collect::<Result<Vec<_>>>()?;

        let mut table = MetricTable::new();
        for (m, real) in &jobs {
            let path = self.cell_path(real.n, *m, real.r);
            let f = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
            table.merge(MetricTable::read_csv(f)?)?;
        }
        let failed = table.cells().filter(|(_, ok)| !**ok).count();
        Ok((table, format!("{total} cells, {failed} failed to converge")))
    }

    fn fit_dir(&self, metric: MetricId, n: usize) -> PathBuf {
        self.path(&format!("fits/{}", FitRecord::dir_name(metric, n)))
    }

    fn fit_seed(&self, metric: MetricId, n: usize) -> u64 {
        RngStream::new(self.cfg.global_seed, format!("fit/{metric}/n{n}")).next_u64()
    }

    /// Fit the hierarchical model on every (n, metric) slice.
    pub fn fit(&mut self, table: &MetricTable) -> Result<Vec<FitRecord>> {
        if self.stage_done(FIT) {
            return self.fit_records();
        }
        self.start(FIT)?;
        let mut cells = Vec::new();
        for n in self.cfg.levels() {
            for &metric in &self.cfg.metrics {
                let seed = self.fit_seed(metric, n);
                self.manifest
                    .seeds
                    .insert(format!("fit/{metric}/n{n}"), seed);
                cells.push((metric, n, seed));
            }
        }
        self.save_manifest()?;
        let this = &*self;
        let res: Result<Vec<FitRecord>> = self
            .in_pool(|| {
                cells
                    .par_iter()
                    .map(|&(metric, n, seed)| this.fit_cell(table, metric, n, seed))
                    .collect()
            })
            .and_then(|r| r);
        match res {
            Ok(records) => {
                let index: Vec<String> = records
                    .iter()
                    .map(|r| FitRecord::dir_name(r.metric, r.n))
                    .collect();
                write_json(&self.path("fits/index.json"), &index)?;
                let failed = records
                    .iter()
                    .filter(|r| r.is_fitted() && !r.passed)
                    .count();
                self.finish(
                    FIT,
                    "fits/index.json",
                    Some(format!(
                        "{} fits, {failed} failed diagnostics",
                        records.len()
                    )),
                )?;
                Ok(records)
            }
            Err(e) => {
                self.fail(FIT, &e);
                Err(e)
            }
        }
    }

    fn fit_cell(
        &self,
        table: &MetricTable,
        metric: MetricId,
        n: usize,
        seed: u64,
    ) -> Result<FitRecord> {
        let dir = self.fit_dir(metric, n);
        let meta = dir.join("meta.json");
        if meta.exists() {
            return read_json(&meta);
        }
        let model = if metric == MetricId::Picp {
            ModelKind::BetaBinomial
        } else {
            ModelKind::Gaussian
        };
        let mut record = FitRecord {
            config_hash: self.manifest.config_hash.clone(),
            n,
            metric,
            model,
            methods: Vec::new(),
            realizations: Vec::new(),
            excluded: Vec::new(),
            n_test: None,
            seed,
            max_rhat: f64::NAN,
            min_ess: f64::NAN,
            passed: false,
            skipped: None,
        };
        let bhm = match table.slice_for_bhm(n, metric, self.cfg.exclude_unconverged) {
            Ok(b) => b,
            Err(e @ CoreError::InsufficientData { .. }) => {
                record.skipped = Some(e.to_string());
                write_json(&meta, &record)?;
                return Ok(record);
            }
            Err(e) => return Err(e.into()),
        };
        record.methods = bhm.methods.clone();
        record.realizations = bhm.realizations.clone();
        record.excluded = bhm.excluded_methods.clone();
        record.n_test = bhm.n_test;
        let labels = record.labels();
        write_atomic(&dir.join("input.csv"), &bhm_input_csv(&bhm)?)?;

        let fit = match model {
            ModelKind::BetaBinomial => {
                let counts = bhm
                    .counts
                    .clone()
                    .ok_or_else(|| anyhow!("PICP slice at n={n} lacks covered counts"))?;
                let n_test = bhm
                    .n_test
                    .ok_or_else(|| anyhow!("PICP slice lacks N_test"))?;
                let mut spec = BetaBinomSpec::new(labels, counts, n_test);
                spec.phi_prior_scale = self.cfg.phi_prior_scale;
                fit_beta_binomial(&spec, &self.cfg.sampler, seed)?
            }
            ModelKind::Gaussian => fit_gaussian(
                &GaussianBhmSpec::new(labels, bhm.values.clone()),
                &self.cfg.sampler,
                seed,
            )?,
        };
        record.max_rhat = fit.diagnostics.max_rhat;
        record.min_ess = fit.diagnostics.min_ess;
        record.passed = fit.diagnostics.passed;

        let mut buf = Vec::new();
        fit.samples.write_csv(&mut buf)?;
        write_atomic(&dir.join("draws.csv"), &buf)?;
        write_json(&dir.join("diagnostics.json"), &fit.diagnostics)?;
        if let Ok(post) = fit.converged() {
            let ppc = posterior_predictive_check(&post, &bhm.values, seed ^ 0x5050)?;
            write_json(&dir.join("ppc.json"), &ppc)?;
        }
        write_json(&meta, &record)?;
        eprintln!(
            "fit {metric} n={n}: max R-hat {:.4}, min ESS {:.0}, {}",
            record.max_rhat,
            record.min_ess,
            if record.passed { "pass" } else { "FAIL" }
        );
        Ok(record)
    }

    /// Every fit record of this run, in (n, metric) order.
    pub fn fit_records(&self) -> Result<Vec<FitRecord>> {
        let mut out = Vec::new();
        for n in self.cfg.levels() {
            for &metric in &self.cfg.metrics {
                let meta = self.fit_dir(metric, n).join("meta.json");
                if meta.exists() {
                    out.push(read_json(&meta)?);
                }
            }
        }
        Ok(out)
    }

    pub fn load_fit(&self, metric: MetricId, n: usize) -> Result<LoadedFit> {
        let dir = self.fit_dir(metric, n);
        let meta = dir.join("meta.json");
        if !meta.exists() {
            bail!(
                "no {metric} fit at n={n} in {}; run `uqbench run` to complete the fit stage",
                self.dir.display()
            );
        }
        let record: FitRecord = read_json(&meta)?;
        if let Some(why) = &record.skipped {
            bail!("{metric} at n={n} was not fitted: {why}");
        }
        let f = fs::File::open(dir.join("draws.csv")).context("opening draws.csv")?;
        let samples = PosteriorSamples::read_csv(f)?;
        let diagnostics: Diagnostics = read_json(&dir.join("diagnostics.json"))?;
        let fit = Fit {
            model: record.model,
            labels: record.labels(),
            samples,
            diagnostics,
            n_test: record.n_test,
        };
        Ok(LoadedFit { record, fit })
    }

    pub fn load_ppc(&self, metric: MetricId, n: usize) -> Result<Option<PpcSummary>> {
        let p = self.fit_dir(metric, n).join("ppc.json");
        if p.exists() {
            Ok(Some(read_json(&p)?))
        } else {
            Ok(None)
        }
    }

    pub fn analyze(&mut self, table: &MetricTable) -> Result<()> {
        if self.stage_done(ANALYZE) {
            return Ok(());
        }
        self.start(ANALYZE)?;
        let res = crate::report::write_analysis(self, table);
        match res {
            Ok(()) => self.finish(ANALYZE, "analysis/fits.csv", None),
            Err(e) => {
                self.fail(ANALYZE, &e);
                Err(e)
            }
        }
    }

    pub fn report(&mut self, table: &MetricTable) -> Result<()> {
        if self.stage_done(REPORT) {
            return Ok(());
        }
        self.start(REPORT)?;
        let res = crate::report::write_report(self, table);
        match res {
            Ok(()) => self.finish(REPORT, "report/index.csv", None),
            Err(e) => {
                self.fail(REPORT, &e);
                Err(e)
            }
        }
    }
}

fn train_cell(
    ds: &Dataset,
    test_x: &Array2<f64>,
    test_y: &[f64],
    method: MethodId,
    real: &uqbench_core::datagen::Realization,
    cfg: &ExperimentConfig,
) -> Result<MetricTable> {
    let cell = CellKey::new(method, real.r, real.n);
    let mut t = MetricTable::new();
    let (x, y) = ds.rows(&real.train_indices);
    match train(
        method,
        DataView::new(&x, &y),
        test_x.view(),
        real.seed,
        &cfg.method_config,
    ) {
        Ok(trained) => {
            let mut rng = RngStream::new(real.seed, format!("score/{method}"));
            let scores = evaluate(
                &trained.dist,
                test_y,
                ScoringConfig::for_method(method),
                &mut rng,
            )?;
            t.set_converged(cell, true);
            for s in scores
                .into_iter()
                .filter(|s| cfg.metrics.contains(&s.metric))
            {
                match s.covered {
                    Some(c) => t.insert_coverage(cell, c)?,
                    None => t.insert(cell.metric(s.metric), s.value)?,
                }
            }
        }
        Err(e) if e.is_convergence_failure() => t.set_converged(cell, false),
        Err(e) => return Err(anyhow!("training {method} n={} r={}: {e}", real.n, real.r)),
    }
    Ok(t)
}

fn bhm_input_csv(bhm: &BhmMatrix) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "realization", "value", "covered"])?;
    for (j, m) in bhm.methods.iter().enumerate() {
        for (i, r) in bhm.realizations.iter().enumerate() {
            let covered = bhm
                .counts
                .as_ref()
                .map(|c| c[[j, i]].to_string())
                .unwrap_or_default();
            w.write_record([
                m.to_string(),
                r.to_string(),
                bhm.values[[j, i]].to_string(),
                covered,
            ])?;
        }
    }
    Ok(w.into_inner().map_err(|e| anyhow!("{e}"))?)
}

/// Group fit records by metric, ordered by n.
pub fn records_by_metric(records: &[FitRecord]) -> BTreeMap<MetricId, Vec<&FitRecord>> {
    let mut out: BTreeMap<MetricId, Vec<&FitRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.metric).or_default().push(r);
    }
    for v in out.values_mut() {
        v.sort_by_key(|r| r.n);
    }
    out
}
