//! Synthetic and CSV-backed regression datasets with a fixed test split,
//! plus the seeded subsampling protocol.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_realization_seed, RngStream, SeedMode};

pub const SYNTHETIC_WEIGHTS: [f64; 8] = [1.5, -2.0, 0.5, 1.0, -0.5, 0.3, -1.2, 0.8];
pub const DEFAULT_TEST_FRACTION: f64 = 0.30;
/// Largest training size, as a fraction of the pool, at which repeated
/// subsamples are still treated as distinct realizations.
pub const DEFAULT_MAX_POOL_FRACTION: f64 = 0.90;
pub const STANDARD_N_LEVELS: [usize; 5] = [30, 50, 100, 200, 500];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub feature_names: Vec<String>,
    /// Standardized features, N x d.
    pub x: Array2<f64>,
    /// Standardized targets.
    pub y: Array1<f64>,
    pub test_mask: Vec<bool>,
    pub pool_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    /// Pool statistics used for standardization.
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Realization {
    pub r: usize,
    pub n: usize,
    pub train_indices: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_total: usize,
    pub noise_scale: f64,
    pub test_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_total: 1200,
            noise_scale: 1.0,
            test_fraction: DEFAULT_TEST_FRACTION,
        }
    }
}

/// Heteroscedastic noise scale at a point.
pub fn synthetic_noise_sd(x1: f64) -> f64 {
    0.3 + 0.5 * x1.abs()
}

/// Unstandardized synthetic draws: `x ~ N(0, I_8)`, `y = w.x + eps`,
/// `eps ~ N(0, (noise_scale * (0.3 + 0.5|x_1|))^2)`.
pub fn synthetic_raw(
    n_total: usize,
    noise_scale: f64,
    rng: &mut RngStream,
) -> (Array2<f64>, Array1<f64>) {
    let d = SYNTHETIC_WEIGHTS.len();
    let mut x = Array2::zeros((n_total, d));
    let mut y = Array1::zeros(n_total);
    for i in 0..n_total {
        let mut signal = 0.0;
        for j in 0..d {
            let v = rng.normal();
            x[[i, j]] = v;
            signal += SYNTHETIC_WEIGHTS[j] * v;
        }
        let eps = rng.normal() * noise_scale * synthetic_noise_sd(x[[i, 0]]);
        y[i] = signal + eps;
    }
    (x, y)
}

/// Number of pool rows after reserving a test fraction.
pub fn pool_size(n_total: usize, test_fraction: f64) -> usize {
    // floor with slack so 0.7 * 1030 lands on 721
    ((n_total as f64) * (1.0 - test_fraction) + 1e-9).floor() as usize
}

pub fn generate_synthetic(global_seed: u64) -> Dataset {
    generate_synthetic_with(global_seed, SyntheticConfig::default())
}

/// The final `test_fraction` of rows in generation order form the test set.
pub fn generate_synthetic_with(global_seed: u64, cfg: SyntheticConfig) -> Dataset {
    let mut rng = RngStream::new(global_seed, "synthetic");
    let (x, y) = synthetic_raw(cfg.n_total, cfg.noise_scale, &mut rng);
    let pool = pool_size(cfg.n_total, cfg.test_fraction);
    let order: Vec<usize> = (0..cfg.n_total).collect();
    let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
    Dataset::standardized("synthetic", names, x, y, &order[..pool], &order[pool..])
}

impl Dataset {
    fn standardized(
        id: &str,
        feature_names: Vec<String>,
        mut x: Array2<f64>,
        mut y: Array1<f64>,
        pool: &[usize],
        test: &[usize],
    ) -> Dataset {
        let (feature_mean, feature_std): (Vec<f64>, Vec<f64>) = x
            .axis_iter(Axis(1))
            .map(|col| {
                let vals: Vec<f64> = pool.iter().map(|&i| col[i]).collect();
                mean_std(&vals)
            })
            .unzip();
        for (j, mut col) in x.axis_iter_mut(Axis(1)).enumerate() {
            col.mapv_inplace(|v| (v - feature_mean[j]) / feature_std[j]);
        }
        let (target_mean, target_std) = mean_std(&pool.iter().map(|&i| y[i]).collect::<Vec<_>>());
        y.mapv_inplace(|v| (v - target_mean) / target_std);

        let mut test_mask = vec![false; y.len()];
        for &i in test {
            test_mask[i] = true;
        }
        Dataset {
            id: id.to_string(),
            feature_names,
            x,
            y,
            test_mask,
            pool_indices: pool.to_vec(),
            test_indices: test.to_vec(),
            feature_mean,
            feature_std,
            target_mean,
            target_std,
        }
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn pool_size(&self) -> usize {
        self.pool_indices.len()
    }

    pub fn test_x(&self) -> Array2<f64> {
        self.x.select(Axis(0), &self.test_indices)
    }

    pub fn test_y(&self) -> Array1<f64> {
        self.y.select(Axis(0), &self.test_indices)
    }

    pub fn rows(&self, idx: &[usize]) -> (Array2<f64>, Array1<f64>) {
        (self.x.select(Axis(0), idx), self.y.select(Axis(0), idx))
    }

    /// Digest of the test rows; constant for the lifetime of a dataset.
    pub fn test_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for &i in &self.test_indices {
            feed(i as u64);
            for v in self.x.row(i) {
                feed(v.to_bits());
            }
            feed(self.y[i].to_bits());
        }
        h
    }

    /// Map a standardized target back to original units.
    pub fn unstandardize_y(&self, v: f64) -> f64 {
        v * self.target_std + self.target_mean
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Mean and population standard deviation. A constant column keeps scale 1.
fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    let sd = var.sqrt();
    (m, if sd > 0.0 { sd } else { 1.0 })
}

pub fn load_csv_dataset(
    path: &Path,
    target_column: &str,
    test_fraction: f64,
    global_seed: u64,
) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    load_csv_reader(file, &id, target_column, test_fraction, global_seed)
}

/// Parse a numeric CSV with a header row. Rows are shuffled with a stream
/// seeded by `global_seed`; the final `test_fraction` of the shuffled order
/// is the test split.
pub fn load_csv_reader<R: Read>(
    reader: R,
    id: &str,
    target_column: &str,
    test_fraction: f64,
    global_seed: u64,
) -> Result<Dataset> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid(format!(
            "test fraction {test_fraction} outside [0, 1)"
        )));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let target_idx = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| Error::MissingColumn(target_column.to_string()))?;

    let mut features: Vec<f64> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        // data rows are 1-based, header excluded
        let row = i + 1;
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: "*".into(),
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: headers[j].clone(),
                message: format!("non-numeric value '{cell}'"),
            })?;
            if j == target_idx {
                targets.push(v);
            } else {
                features.push(v);
            }
        }
    }
    let n_total = targets.len();
    let d = headers.len() - 1;
    if n_total < 2 {
        return Err(Error::invalid("dataset needs at least two rows"));
    }
    let x = Array2::from_shape_vec((n_total, d), features).expect("row-major shape");
    let y = Array1::from_vec(targets);

    let mut rng = RngStream::new(global_seed, format!("split/{id}"));
    let order: Vec<usize> = sample(rng.rng_mut(), n_total, n_total).into_vec();
    let pool = pool_size(n_total, test_fraction);
    let names = headers
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let mut pool_idx = order[..pool].to_vec();
    let mut test_idx = order[pool..].to_vec();
    pool_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(Dataset::standardized(id, names, x, y, &pool_idx, &test_idx))
}

/// Largest admissible training size for a pool.
pub fn max_training_size(pool: usize, max_pool_fraction: f64) -> usize {
    ((pool as f64) * max_pool_fraction + 1e-9).floor() as usize
}

/// Training sizes from `levels` admissible for the pool.
pub fn feasible_levels(pool: usize, levels: &[usize], max_pool_fraction: f64) -> Vec<usize> {
    let cap = max_training_size(pool, max_pool_fraction);
    levels.iter().copied().filter(|n| *n <= cap).collect()
}

/// `R` seeded subsamples of size `n` from the pool. `n` may not exceed
/// `max_pool_fraction` of the pool (use 1.0 to allow the whole pool).
pub fn draw_realizations(
    ds: &Dataset,
    n: usize,
    count: usize,
    global_seed: u64,
    mode: SeedMode,
    max_pool_fraction: f64,
) -> Result<Vec<Realization>> {
    let pool = ds.pool_size();
    if n > max_training_size(pool, max_pool_fraction.min(1.0)) {
        return Err(Error::SizeExceedsPool {
            n,
            pool,
            feasible: feasible_levels(pool, &STANDARD_N_LEVELS, max_pool_fraction),
        });
    }
    if count == 0 || n == 0 {
        return Err(Error::invalid("need n >= 1 and at least one realization"));
    }
    Ok((1..=count)
        .map(|r| draw_realization(ds, r, n, global_seed, mode))
        .collect())
}

pub fn draw_realization(
    ds: &Dataset,
    r: usize,
    n: usize,
    global_seed: u64,
    mode: SeedMode,
) -> Realization {
    let seed = derive_realization_seed(global_seed, r, n, mode);
    let mut rng = RngStream::new(seed, "subsample");
    let picks = sample(rng.rng_mut(), ds.pool_size(), n);
    let train_indices = picks.iter().map(|k| ds.pool_indices[k]).collect();
    Realization {
        r,
        n,
        train_indices,
        seed,
    }
}

/// Borrowed training or evaluation data.
#[derive(Debug, Clone, Copy)]
pub struct DataView<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: ArrayView1<'a, f64>,
}

impl<'a> DataView<'a> {
    pub fn new(x: &'a Array2<f64>, y: &'a Array1<f64>) -> Self {
        Self {
            x: x.view(),
            y: y.view(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::fmt::Write as _;

    fn csv_text(rows: usize, bad_row: Option<usize>) -> String {
        let mut s = String::from("a,b,target\n");
        for i in 1..=rows {
            if Some(i) == bad_row {
                writeln!(s, "{},oops,{}", i, i * 2).unwrap();
            } else {
                writeln!(s, "{},{},{}", i, (i * 7) % 13, i as f64 * 0.5).unwrap();
            }
        }
        s
    }

    #[test]
    fn synthetic_pool_and_test_sizes() {
        let ds = generate_synthetic(42);
        assert_eq!(ds.x.dim(), (1200, 8));
        assert_eq!(ds.pool_size(), 840);
        assert_eq!(ds.test_indices.len(), 360);
        assert_eq!(ds.test_indices[0], 840);
        assert!(ds.test_mask[1199] && !ds.test_mask[839]);
    }

    #[test]
    fn noiseless_synthetic_is_exactly_linear() {
        let mut rng = RngStream::new(42, "synthetic");
        let (x, y) = synthetic_raw(500, 0.0, &mut rng);
        for i in 0..500 {
            let lin: f64 = (0..8).map(|j| SYNTHETIC_WEIGHTS[j] * x[[i, j]]).sum();
            assert_eq!(y[i] - lin, 0.0);
        }
    }

    #[test]
    fn synthetic_noise_variance_by_decile() {
        // Monte Carlo check of Var(y - w.x | x1) against (0.3 + 0.5|x1|)^2
        let n = 1_000_000;
        let mut rng = RngStream::new(7, "noise-check");
        let (x, y) = synthetic_raw(n, 1.0, &mut rng);
        let mut rows: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let lin: f64 = (0..8).map(|j| SYNTHETIC_WEIGHTS[j] * x[[i, j]]).sum();
                (x[[i, 0]], y[i] - lin)
            })
            .collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for bin in rows.chunks(n / 10) {
            let emp = bin.iter().map(|(_, e)| e * e).sum::<f64>() / bin.len() as f64;
            let model = bin
                .iter()
                .map(|(x1, _)| synthetic_noise_sd(*x1).powi(2))
                .sum::<f64>()
                / bin.len() as f64;
            assert!((emp / model - 1.0).abs() < 0.10, "emp {emp} model {model}");
        }
    }

    #[test]
    fn standardization_uses_pool_statistics() {
        let ds = generate_synthetic(42);
        for j in 0..8 {
            let vals: Vec<f64> = ds.pool_indices.iter().map(|&i| ds.x[[i, j]]).collect();
            let (m, s) = mean_std(&vals);
            assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
        }
        let ys: Vec<f64> = ds.pool_indices.iter().map(|&i| ds.y[i]).collect();
        let (m, s) = mean_std(&ys);
        assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pool_sizes_for_named_datasets() {
        assert_eq!(pool_size(1030, 0.30), 721);
        assert_eq!(pool_size(308, 0.30), 215);
        assert_eq!(pool_size(1200, 0.30), 840);
        assert_eq!(pool_size(8192, 0.30), 5734);
    }

    #[test]
    fn csv_loader_splits_and_standardizes() {
        let ds = load_csv_reader(
            csv_text(1030, None).as_bytes(),
            "fixture",
            "target",
            0.30,
            42,
        )
        .unwrap();
        assert_eq!(ds.pool_size(), 721);
        assert_eq!(ds.n_features(), 2);
        assert_eq!(ds.feature_names, vec!["a", "b"]);
        let pool: HashSet<_> = ds.pool_indices.iter().collect();
        assert!(ds.test_indices.iter().all(|i| !pool.contains(i)));
        let again = load_csv_reader(
            csv_text(1030, None).as_bytes(),
            "fixture",
            "target",
            0.30,
            42,
        )
        .unwrap();
        assert_eq!(ds, again);

        let yacht =
            load_csv_reader(csv_text(308, None).as_bytes(), "yacht", "target", 0.30, 42).unwrap();
        assert_eq!(yacht.pool_size(), 215);
    }

    #[test]
    fn csv_loader_reports_bad_cell_row() {
        let err =
            load_csv_reader(csv_text(20, Some(7)).as_bytes(), "f", "target", 0.3, 1).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 7);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other}"),
        }
        let err = load_csv_reader(csv_text(20, None).as_bytes(), "f", "y", 0.3, 1).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(_)));
    }

    #[test]
    fn realizations_respect_pool_and_determinism() {
        let ds =
            load_csv_reader(csv_text(308, None).as_bytes(), "yacht", "target", 0.30, 42).unwrap();
        let err = draw_realizations(&ds, 200, 5, 42, SeedMode::Mixed, DEFAULT_MAX_POOL_FRACTION)
            .unwrap_err();
        match err {
            Error::SizeExceedsPool { feasible, .. } => assert_eq!(feasible, vec![30, 50, 100]),
            other => panic!("unexpected {other}"),
        }

        assert!(draw_realizations(&ds, 216, 1, 42, SeedMode::Mixed, 1.0).is_err());
        let all = draw_realizations(&ds, 215, 1, 42, SeedMode::Mixed, 1.0).unwrap();
        let mut idx = all[0].train_indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, ds.pool_indices);

        let a =
            draw_realizations(&ds, 50, 3, 42, SeedMode::Mixed, DEFAULT_MAX_POOL_FRACTION).unwrap();
        let b =
            draw_realizations(&ds, 50, 3, 42, SeedMode::Mixed, DEFAULT_MAX_POOL_FRACTION).unwrap();
        assert_eq!(a, b);
        let pool: HashSet<_> = ds.pool_indices.iter().copied().collect();
        for r in &a {
            let uniq: HashSet<_> = r.train_indices.iter().copied().collect();
            assert_eq!(uniq.len(), 50);
            assert!(uniq.is_subset(&pool));
        }
        assert_ne!(a[0].train_indices, a[1].train_indices);
    }

    #[test]
    fn feasible_levels_match_named_datasets() {
        let f = DEFAULT_MAX_POOL_FRACTION;
        assert_eq!(
            feasible_levels(840, &STANDARD_N_LEVELS, f),
            vec![30, 50, 100, 200, 500]
        );
        assert_eq!(
            feasible_levels(538, &STANDARD_N_LEVELS, f),
            vec![30, 50, 100, 200]
        );
        assert_eq!(
            feasible_levels(721, &STANDARD_N_LEVELS, f),
            vec![30, 50, 100, 200, 500]
        );
        assert_eq!(
            feasible_levels(5734, &STANDARD_N_LEVELS, f),
            vec![30, 50, 100, 200, 500]
        );
        assert_eq!(
            feasible_levels(215, &STANDARD_N_LEVELS, f),
            vec![30, 50, 100]
        );
    }

    #[test]
    fn test_digest_is_stable() {
        let ds = generate_synthetic(42);
        assert_eq!(ds.test_digest(), generate_synthetic(42).test_digest());
        assert_ne!(ds.test_digest(), generate_synthetic(43).test_digest());
    }
}
