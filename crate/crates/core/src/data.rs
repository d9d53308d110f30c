//! Tabular data: CSV ingestion, standardization, splitting and the
//! synthetic blockwise generator.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DataError, Error, Result};
use crate::model::{auto_groups, Task};
use crate::streams;
use crate::tensor::{column_moments, Matrix, Rng};

/// Standardization never divides by less than this.
pub const MIN_STDDEV: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Dense class indices `0..n_classes`.
    Classes {
        labels: Vec<usize>,
        n_classes: usize,
    },
    Values(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Targets::Classes { .. } => Task::Classification,
            Targets::Values(_) => Task::Regression,
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, n_classes } => Targets::Classes {
                labels: rows.iter().map(|&r| labels[r]).collect(),
                n_classes: *n_classes,
            },
            Targets::Values(m) => Targets::Values(m.select_rows(rows)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTable {
    pub features: Matrix,
    pub targets: Targets,
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// Original label of each class index, in first-appearance order.
    pub class_names: Vec<String>,
}

/// Row/column counts plus a SHA-256 over the feature and target values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataFingerprint {
    pub rows: usize,
    pub cols: usize,
    pub sha256: String,
}

impl DatasetTable {
    pub fn new(features: Matrix, targets: Targets, feature_names: Vec<String>, target_name: String) -> Result<Self> {
        if features.rows() != targets.len() {
            return Err(DataError::Incompatible(format!(
                "{} feature rows but {} targets",
                features.rows(),
                targets.len()
            ))
            .into());
        }
        if feature_names.len() != features.cols() {
            return Err(DataError::Incompatible(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                features.cols()
            ))
            .into());
        }
        let class_names = match &targets {
            Targets::Classes { n_classes, .. } => (0..*n_classes).map(|c| c.to_string()).collect(),
            Targets::Values(_) => Vec::new(),
        };
        Ok(Self {
            features,
            targets,
            feature_names,
            target_name,
            class_names,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.features.rows()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> DatasetTable {
        DatasetTable {
            features: self.features.select_rows(rows),
            targets: self.targets.select_rows(rows),
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn with_features(&self, features: Matrix) -> DatasetTable {
        DatasetTable {
            features,
            ..self.clone()
        }
    }

    pub fn fingerprint(&self) -> DataFingerprint {
        let mut h = Sha256::new();
        for v in self.features.as_slice() {
            h.update(v.to_le_bytes());
        }
        match &self.targets {
            Targets::Classes { labels, .. } => {
                for &l in labels {
                    h.update((l as u64).to_le_bytes());
                }
            }
            Targets::Values(m) => {
                for v in m.as_slice() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        DataFingerprint {
            rows: self.n_rows(),
            cols: self.n_features(),
            sha256: hex::encode(h.finalize()),
        }
    }
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64, DataError> {
    let cell = raw.trim();
    if cell.is_empty() {
        return Err(DataError::MissingValue {
            row,
            column: column.to_owned(),
        });
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(DataError::NonNumeric {
            row,
            column: column.to_owned(),
            value: cell.to_owned(),
        }),
    }
}

/// Reads a comma-separated file with a header row. Rows are numbered from 1,
/// not counting the header.
pub fn load_csv(path: impl AsRef<Path>, target_column: &str, task: Task) -> Result<DatasetTable> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = File::open(path).map_err(|e| DataError::Missing {
        path: shown.clone(),
        reason: e.to_string(),
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .quoting(false)
        .flexible(true)
        .from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Malformed(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_owned())
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(DataError::Empty(shown).into());
    }
    let target_idx = header
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| DataError::NoTargetColumn(target_column.to_owned()))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != target_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut class_index: HashMap<String, usize> = HashMap::new();
    let mut class_names = Vec::new();
    let mut reg_targets = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DataError::Malformed(e.to_string()))?;
        if record.len() != header.len() {
            return Err(DataError::Ragged {
                row,
                expected: header.len(),
                found: record.len(),
            }
            .into());
        }
        for (c, raw) in record.iter().enumerate() {
            if c == target_idx {
                match task {
                    Task::Classification => {
                        let label = raw.trim();
                        if label.is_empty() {
                            return Err(DataError::MissingValue {
                                row,
                                column: header[c].clone(),
                            }
                            .into());
                        }
                        let next = class_index.len();
                        let idx = *class_index.entry(label.to_owned()).or_insert_with(|| {
                            class_names.push(label.to_owned());
                            next
                        });
                        labels.push(idx);
                    }
                    Task::Regression => reg_targets.push(parse_cell(raw, row, &header[c])?),
                }
            } else {
                values.push(parse_cell(raw, row, &header[c])?);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DataError::Empty(shown).into());
    }
    let features = Matrix::from_vec(rows, feature_names.len(), values)?;
    let targets = match task {
        Task::Classification => Targets::Classes {
            labels,
            n_classes: class_names.len(),
        },
        Task::Regression => Targets::Values(Matrix::from_vec(rows, 1, reg_targets)?),
    };
    let mut table = DatasetTable::new(features, targets, feature_names, target_column.to_owned())?;
    if task == Task::Classification {
        table.class_names = class_names;
    }
    Ok(table)
}

/// Writes `table` in the format [`load_csv`] reads; the target column goes last.
pub fn save_csv(table: &DatasetTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = String::new();
    out.push_str(&table.feature_names.join(","));
    out.push(',');
    out.push_str(&table.target_name);
    out.push('\n');
    for r in 0..table.n_rows() {
        for v in table.features.row(r) {
            // `{}` on f64 prints the shortest string that parses back exactly
            out.push_str(&format!("{v},"));
        }
        match &table.targets {
            Targets::Classes { labels, .. } => out.push_str(&table.class_names[labels[r]]),
            Targets::Values(m) => out.push_str(&format!("{}", m.get(r, 0))),
        }
        out.push('\n');
    }
    let mut f = File::create(path).map_err(io_err)?;
    f.write_all(out.as_bytes()).map_err(io_err)
}

/// Per-column mean and (biased) standard deviation of a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizeStats {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl StandardizeStats {
    pub fn fit(x: &Matrix) -> Result<Self> {
        let (mean, var) = column_moments(x)?;
        Ok(Self {
            mean: mean.into_vec(),
            stddev: var.into_vec().into_iter().map(f64::sqrt).collect(),
        })
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(DataError::Incompatible(format!(
                "standardization fitted on {} columns, data has {}",
                self.mean.len(),
                x.cols()
            ))
            .into());
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.stddev[c].max(MIN_STDDEV);
            }
        }
        Ok(out)
    }
}

/// Standardizes both tables with statistics learned from `train`.
pub fn standardize(
    train: &DatasetTable,
    apply_to: &DatasetTable,
) -> Result<(DatasetTable, DatasetTable, StandardizeStats)> {
    let stats = StandardizeStats::fit(&train.features)?;
    let t = train.with_features(stats.apply(&train.features)?);
    let a = apply_to.with_features(stats.apply(&apply_to.features)?);
    Ok((t, a, stats))
}

/// Seeded permutation, then the first `round(n·test_fraction)` rows become the test split.
pub fn train_test_split(table: &DatasetTable, test_fraction: f64, seed: u64) -> Result<(DatasetTable, DatasetTable)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::domain(
            "train_test_split",
            format!("test fraction must be in (0, 1), got {test_fraction}"),
        ));
    }
    let n = table.n_rows();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::domain(
            "train_test_split",
            format!("fraction {test_fraction} of {n} rows leaves an empty split"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::with_stream(seed, streams::SPLIT).shuffle(&mut order);
    let (test, train) = order.split_at(n_test);
    Ok((table.select_rows(train), table.select_rows(test)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_rows: usize,
    pub n_features: usize,
    pub n_groups: usize,
    pub n_classes: usize,
    pub noise_std: f64,
    pub seed: u64,
}

/// Synthetic classification data whose label depends on every column group.
///
/// Features are i.i.d. standard normal. Columns are split into `n_groups`
/// contiguous groups (remainder on the last); group `g` is summarized by
/// `a_g = Σ x_j / sqrt(|g|)` and placed at angle `φ_g = π(g + ½)/G` in the
/// plane, giving `z = Σ a_g e^{iφ_g}`. Class `c` sits at angle `2πc/K` and
/// scores `s_c = Σ_g a_g cos(2πc/K − φ_g) + noise_std·ε_c`; the label is the
/// argmax. For `G ≥ 2`, `z` is isotropic so classes are balanced, and
/// dropping any one `a_g` rotates `z`, so every group carries signal.
pub fn synth_blockwise(p: &SynthParams) -> Result<DatasetTable> {
    let bad = |detail: String| Err(Error::domain("synth_blockwise", detail));
    if p.n_rows == 0 {
        return bad("n_rows must be >= 1".into());
    }
    if p.n_groups == 0 || p.n_groups > p.n_features {
        return bad(format!(
            "need 1 <= n_groups <= n_features, got {} groups for {} features",
            p.n_groups, p.n_features
        ));
    }
    if p.n_classes < 2 {
        return bad(format!("n_classes must be >= 2, got {}", p.n_classes));
    }
    if !p.noise_std.is_finite() || p.noise_std < 0.0 {
        return bad(format!("noise_std must be finite and >= 0, got {}", p.noise_std));
    }
    let groups = auto_groups(p.n_features, p.n_groups)?;
    let g_count = p.n_groups as f64;
    let k_count = p.n_classes as f64;
    // weight[c][g] = cos(θ_c − φ_g)
    let weight: Vec<Vec<f64>> = (0..p.n_classes)
        .map(|c| {
            (0..p.n_groups)
                .map(|g| (2.0 * PI * c as f64 / k_count - PI * (g as f64 + 0.5) / g_count).cos())
                .collect()
        })
        .collect();

    let mut rng = Rng::with_stream(p.seed, streams::SYNTH);
    let mut features = Matrix::zeros(p.n_rows, p.n_features);
    let mut labels = Vec::with_capacity(p.n_rows);
    let mut agg = vec![0.0; p.n_groups];
    for r in 0..p.n_rows {
        let row = features.row_mut(r);
        for v in row.iter_mut() {
            *v = rng.standard_normal();
        }
        for (a, cols) in agg.iter_mut().zip(&groups) {
            *a = cols.iter().map(|&c| row[c]).sum::<f64>() / (cols.len() as f64).sqrt();
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (c, w) in weight.iter().enumerate() {
            let noise = rng.standard_normal();
            let s = w.iter().zip(&agg).map(|(w, a)| w * a).sum::<f64>() + p.noise_std * noise;
            if s > best.1 {
                best = (c, s);
            }
        }
        labels.push(best.0);
    }
    DatasetTable::new(
        features,
        Targets::Classes {
            labels,
            n_classes: p.n_classes,
        },
        (0..p.n_features).map(|i| format!("f{i}")).collect(),
        "label".into(),
    )
}

/// Replaces the listed columns with fresh standard-normal noise, leaving
/// targets untouched. Used to ablate one group's signal.
pub fn mask_columns_with_noise(table: &DatasetTable, cols: &[usize], seed: u64) -> Result<DatasetTable> {
    if let Some(&bad) = cols.iter().find(|&&c| c >= table.n_features()) {
        return Err(Error::shape(
            "mask_columns_with_noise",
            format!("column {bad} out of range for {} features", table.n_features()),
        ));
    }
    let mut rng = Rng::with_stream(seed, streams::ABLATION);
    let mut features = table.features.clone();
    for r in 0..features.rows() {
        let row = features.row_mut(r);
        for &c in cols {
            row[c] = rng.standard_normal();
        }
    }
    Ok(table.with_features(features))
}
