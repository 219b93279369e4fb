//! Dataset ingestion, `[-1, 1]` normalization, train/test splitting, and the
//! RMSE metrics used by the benchmark harness.

use crate::error::{NoviError, Result};
use crate::rng::NoviRng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// In-memory dataset: features `(N, d)`, targets `(N, D)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
    pub source: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn target_dim(&self) -> usize {
        self.y.cols()
    }

    fn take_rows(&self, idx: &[usize]) -> Dataset {
        let d = self.feature_dim();
        let t = self.target_dim();
        let mut x = Vec::with_capacity(idx.len() * d);
        let mut y = Vec::with_capacity(idx.len() * t);
        for &i in idx {
            x.extend_from_slice(&self.x.data()[i * d..(i + 1) * d]);
            y.extend_from_slice(&self.y.data()[i * t..(i + 1) * t]);
        }
        Dataset {
            x: Tensor::new(vec![idx.len(), d], x).expect("shape"),
            y: Tensor::new(vec![idx.len(), t], y).expect("shape"),
            feature_names: self.feature_names.clone(),
            target_names: self.target_names.clone(),
            source: self.source.clone(),
        }
    }
}

/// How target columns are chosen from a CSV.
#[derive(Debug, Clone)]
pub enum TargetSpec {
    /// Named columns become targets; remaining columns become features.
    Names(Vec<String>),
    /// The trailing column is the single target.
    Trailing,
}

/// Parse a headered, comma-separated, all-numeric CSV. Any unparsable cell
/// aborts with its data-row index.
pub fn load_csv(path: &Path, targets: &TargetSpec) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        NoviError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((_, l)) => break l,
            None => return Err(NoviError::format("empty csv file")),
        }
    };
    let columns: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
    let ncols = columns.len();

    let target_idx: Vec<usize> = match targets {
        TargetSpec::Trailing => vec![ncols - 1],
        TargetSpec::Names(names) => {
            if names.is_empty() {
                return Err(NoviError::input("empty target selection"));
            }
            names
                .iter()
                .map(|n| {
                    columns
                        .iter()
                        .position(|c| c == n)
                        .ok_or_else(|| NoviError::input(format!("no column named '{n}'")))
                })
                .collect::<Result<_>>()?
        }
    };
    if target_idx.len() >= ncols {
        return Err(NoviError::input("no feature columns left"));
    }
    let feature_idx: Vec<usize> = (0..ncols).filter(|i| !target_idx.contains(i)).collect();

    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut rows = 0usize;
    for (_, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != ncols {
            return Err(NoviError::format(format!(
                "row {rows}: {} cells, expected {ncols}",
                cells.len()
            )));
        }
        let parsed: Vec<f64> = cells
            .iter()
            .enumerate()
            .map(|(ci, c)| {
                c.trim().parse::<f64>().map_err(|_| {
                    NoviError::format(format!(
                        "row {rows}: cell '{}' in column '{}' is not numeric",
                        c.trim(),
                        columns[ci]
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if parsed.iter().any(|v| !v.is_finite()) {
            return Err(NoviError::format(format!("row {rows}: non-finite value")));
        }
        x.extend(feature_idx.iter().map(|&i| parsed[i]));
        y.extend(target_idx.iter().map(|&i| parsed[i]));
    }
    if rows == 0 {
        return Err(NoviError::format("csv has a header but no data rows"));
    }
    Ok(Dataset {
        x: Tensor::new(vec![rows, feature_idx.len()], x)?,
        y: Tensor::new(vec![rows, target_idx.len()], y)?,
        feature_names: feature_idx.iter().map(|&i| columns[i].clone()).collect(),
        target_names: target_idx.iter().map(|&i| columns[i].clone()).collect(),
        source: path.display().to_string(),
    })
}

/// Per-column ranges computed on training rows; both features and targets
/// map affinely onto `[-1, 1]`, constant columns onto 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub y_min: Vec<f64>,
    pub y_max: Vec<f64>,
}

impl NormStats {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let ranges = |t: &Tensor| -> (Vec<f64>, Vec<f64>) {
            let (n, m) = (t.rows(), t.cols());
            let mut lo = vec![f64::INFINITY; m];
            let mut hi = vec![f64::NEG_INFINITY; m];
            for i in 0..n {
                for j in 0..m {
                    lo[j] = lo[j].min(t.at(i, j));
                    hi[j] = hi[j].max(t.at(i, j));
                }
            }
            (lo, hi)
        };
        let (x_min, x_max) = ranges(&ds.x);
        let (y_min, y_max) = ranges(&ds.y);
        NormStats {
            x_min,
            x_max,
            y_min,
            y_max,
        }
    }
}

fn map_columns(t: &Tensor, lo: &[f64], hi: &[f64]) -> Result<Tensor> {
    let (n, m) = (t.rows(), t.cols());
    if lo.len() != m {
        return Err(NoviError::dim(format!(
            "normalization stats for {} columns applied to {m}",
            lo.len()
        )));
    }
    let mut out = t.clone();
    for i in 0..n {
        for j in 0..m {
            let (a, b) = (lo[j], hi[j]);
            let v = if b > a {
                2.0 * (t.at(i, j) - a) / (b - a) - 1.0
            } else {
                0.0
            };
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Normalize onto `[-1, 1]`. With `stats = None` the ranges are computed from
/// `ds` itself (the training set); pass the training stats for test rows, so
/// values outside the training range map outside `[-1, 1]` without clipping.
pub fn normalize(ds: &Dataset, stats: Option<&NormStats>) -> Result<(Dataset, NormStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::from_dataset(ds),
    };
    let x = map_columns(&ds.x, &stats.x_min, &stats.x_max)?;
    let y = map_columns(&ds.y, &stats.y_min, &stats.y_max)?;
    Ok((
        Dataset {
            x,
            y,
            feature_names: ds.feature_names.clone(),
            target_names: ds.target_names.clone(),
            source: ds.source.clone(),
        },
        stats,
    ))
}

/// Invert the target map exactly.
pub fn denormalize_y(y_norm: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let (n, m) = (y_norm.rows(), y_norm.cols());
    if stats.y_min.len() != m {
        return Err(NoviError::dim("denormalize: target width mismatch"));
    }
    let mut out = y_norm.clone();
    for i in 0..n {
        for j in 0..m {
            let (a, b) = (stats.y_min[j], stats.y_max[j]);
            let v = if b > a {
                (y_norm.at(i, j) + 1.0) / 2.0 * (b - a) + a
            } else {
                a
            };
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Rescale a variance on the normalized target scale back to data units.
pub fn denormalize_y_variance(var_norm: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let (n, m) = (var_norm.rows(), var_norm.cols());
    if stats.y_min.len() != m {
        return Err(NoviError::dim("denormalize: target width mismatch"));
    }
    let mut out = var_norm.clone();
    for i in 0..n {
        for j in 0..m {
            let half_range = (stats.y_max[j] - stats.y_min[j]) / 2.0;
            out.set(i, j, var_norm.at(i, j) * half_range * half_range);
        }
    }
    Ok(out)
}

/// Uniformly shuffled disjoint partition with `ceil(fraction * N)` training
/// rows; deterministic in the seed.
pub fn split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(NoviError::input(format!("split fraction {fraction}")));
    }
    let n = ds.len();
    if n < 2 {
        return Err(NoviError::input("need at least 2 rows to split"));
    }
    let mut rng = NoviRng::seed_from_u64(seed);
    let perm = rng.permutation(n);
    let n_train = ((fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let train_idx = &perm[..n_train];
    let test_idx = &perm[n_train..];
    Ok((ds.take_rows(train_idx), ds.take_rows(test_idx)))
}

/// Root mean squared residual between equally-shaped tensors.
pub fn rmse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(NoviError::dim(format!(
            "rmse shapes {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.numel() == 0 {
        return Err(NoviError::input("rmse of empty tensors"));
    }
    let ss: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((ss / pred.numel() as f64).sqrt())
}

/// Mean and standard error (sample std over sqrt(n)) of repeated run metrics.
pub fn repeated_run_stats(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(NoviError::input("no values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Expected shape of a known benchmark CSV: row count, feature count after
/// target selection, and the target columns (empty = trailing column).
#[derive(Debug, Clone)]
pub struct UciSchema {
    pub name: &'static str,
    pub rows: usize,
    pub features: usize,
    pub targets: &'static [&'static str],
}

/// Download-free registry: the expected schema of each supported benchmark
/// file. Users supply the raw CSVs; `data-check` validates them against this.
pub const UCI_REGISTRY: &[UciSchema] = &[
    UciSchema { name: "boston", rows: 506, features: 13, targets: &["MEDV"] },
    UciSchema { name: "energy", rows: 768, features: 8, targets: &["Y1"] },
    UciSchema { name: "yacht", rows: 308, features: 6, targets: &[] },
    UciSchema { name: "kin8nm", rows: 8192, features: 8, targets: &["y"] },
    UciSchema { name: "concrete", rows: 1030, features: 8, targets: &[] },
    UciSchema { name: "power", rows: 9568, features: 4, targets: &["PE"] },
];

pub fn uci_schema(name: &str) -> Option<&'static UciSchema> {
    UCI_REGISTRY.iter().find(|s| s.name == name)
}

impl UciSchema {
    pub fn target_spec(&self) -> TargetSpec {
        if self.targets.is_empty() {
            TargetSpec::Trailing
        } else {
            TargetSpec::Names(self.targets.iter().map(|s| s.to_string()).collect())
        }
    }

    pub fn check(&self, ds: &Dataset) -> Result<()> {
        if ds.len() != self.rows {
            return Err(NoviError::input(format!(
                "{}: {} rows, expected {}",
                self.name,
                ds.len(),
                self.rows
            )));
        }
        if ds.feature_dim() != self.features {
            return Err(NoviError::input(format!(
                "{}: {} feature columns, expected {}",
                self.name,
                ds.feature_dim(),
                self.features
            )));
        }
        Ok(())
    }
}

/// Write predictions as `id, mean, variance` rows (denormalized scale).
pub fn write_predictions_csv(
    path: &Path,
    mean: &Tensor,
    variance: &Tensor,
) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "id,mean,variance")?;
    for i in 0..mean.rows() {
        writeln!(f, "{},{},{}", i, mean.at(i, 0), variance.at(i, 0))?;
    }
    Ok(())
}
