//! Dataset ingestion and global equal-density histogram binning.
//!
//! Features are quantized once, before boosting starts, into per-feature bin
//! indices. Edges are placed at empirical quantiles of each feature so that
//! bins hold roughly equal sample counts. A value lands in the bin given by
//! the number of edges strictly below it, so values equal to an edge go to
//! the lower bin and values outside the training range clamp to the first or
//! last bin.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

/// Bin index type. Supports up to 65 536 bins per feature.
pub type BinIndex = u16;

/// Largest accepted `max_bins`.
pub const MAX_BINS_LIMIT: usize = BinIndex::MAX as usize + 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(String),
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("cannot parse value at row {row}, column {col}: `{value}`")]
    ParseError { row: usize, col: usize, value: String },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset has no feature columns")]
    NoFeatures,
    #[error("feature count mismatch: expected {expected}, found {found}")]
    FeatureCountMismatch { expected: usize, found: usize },
    #[error("target length {target} does not match sample count {samples}")]
    TargetLengthMismatch { target: usize, samples: usize },
    #[error("max_bins must be in [2, {MAX_BINS_LIMIT}], got {0}")]
    InvalidMaxBins(usize),
}

/// Dense row-major feature matrix without a target.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Vec<f64>,
    n_samples: usize,
    n_features: usize,
    names: Vec<String>,
}

impl FeatureMatrix {
    /// Builds a matrix from row vectors. Names default to `x0, x1, ...`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DataError> {
        let n_features = rows.first().map(Vec::len).ok_or(DataError::EmptyDataset)?;
        let names = (0..n_features).map(|j| format!("x{j}")).collect();
        let mut values = Vec::with_capacity(rows.len() * n_features);
        for row in rows {
            if row.len() != n_features {
                return Err(DataError::FeatureCountMismatch {
                    expected: n_features,
                    found: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(values, n_features, names)
    }

    /// Builds a matrix from a flat row-major buffer.
    pub fn new(values: Vec<f64>, n_features: usize, names: Vec<String>) -> Result<Self, DataError> {
        if n_features == 0 {
            return Err(DataError::NoFeatures);
        }
        if values.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        if !values.len().is_multiple_of(n_features) || names.len() != n_features {
            return Err(DataError::FeatureCountMismatch {
                expected: n_features,
                found: if names.len() != n_features { names.len() } else { values.len() % n_features },
            });
        }
        let n_samples = values.len() / n_features;
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteValue {
                row: pos / n_features,
                col: pos % n_features,
            });
        }
        Ok(Self {
            values,
            n_samples,
            n_features,
            names,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_features + j]
    }

    /// Copies out one feature column.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_samples).map(|i| self.get(i, j)).collect()
    }

    /// Selects a subset of rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut values = Vec::with_capacity(rows.len() * self.n_features);
        for &i in rows {
            values.extend_from_slice(self.row(i));
        }
        Self {
            values,
            n_samples: rows.len(),
            n_features: self.n_features,
            names: self.names.clone(),
        }
    }
}

/// Feature matrix plus regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub features: FeatureMatrix,
    pub target: Vec<f64>,
}

impl RawDataset {
    pub fn new(features: FeatureMatrix, target: Vec<f64>) -> Result<Self, DataError> {
        if target.len() != features.n_samples() {
            return Err(DataError::TargetLengthMismatch {
                target: target.len(),
                samples: features.n_samples(),
            });
        }
        if let Some(row) = target.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteValue {
                row,
                col: features.n_features(),
            });
        }
        Ok(Self { features, target })
    }

    pub fn from_rows(rows: &[Vec<f64>], target: Vec<f64>) -> Result<Self, DataError> {
        Self::new(FeatureMatrix::from_rows(rows)?, target)
    }

    pub fn n_samples(&self) -> usize {
        self.features.n_samples()
    }

    pub fn n_features(&self) -> usize {
        self.features.n_features()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(rows),
            target: rows.iter().map(|&i| self.target[i]).collect(),
        }
    }
}

/// Parsed CSV table: header plus numeric cells.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_table(path: &Path) -> Result<Table, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Csv(e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        let mut values = Vec::with_capacity(record.len());
        for (col, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            let value: f64 = cell.parse().map_err(|_| DataError::ParseError {
                row,
                col,
                value: cell.to_string(),
            })?;
            if !value.is_finite() {
                return Err(DataError::NonFiniteValue { row, col });
            }
            values.push(value);
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(Table { header, rows })
}

fn split_table(table: Table, exclude: Option<usize>) -> Result<(FeatureMatrix, Vec<f64>), DataError> {
    let feature_cols: Vec<usize> = (0..table.header.len()).filter(|&c| Some(c) != exclude).collect();
    if feature_cols.is_empty() {
        return Err(DataError::NoFeatures);
    }
    let names = feature_cols.iter().map(|&c| table.header[c].clone()).collect();
    let mut values = Vec::with_capacity(table.rows.len() * feature_cols.len());
    let mut target = Vec::with_capacity(if exclude.is_some() { table.rows.len() } else { 0 });
    for row in &table.rows {
        values.extend(feature_cols.iter().map(|&c| row[c]));
        if let Some(t) = exclude {
            target.push(row[t]);
        }
    }
    Ok((FeatureMatrix::new(values, feature_cols.len(), names)?, target))
}

/// Loads a headed numeric CSV, extracting `target_column` as the target and
/// keeping every other column (in file order) as a feature.
pub fn load_csv(path: impl AsRef<Path>, target_column: &str) -> Result<RawDataset, DataError> {
    let table = read_table(path.as_ref())?;
    let target = table
        .header
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| DataError::MissingColumn(target_column.to_string()))?;
    let (features, target) = split_table(table, Some(target))?;
    RawDataset::new(features, target)
}

/// Loads a headed numeric CSV as features only. `exclude` drops a column if
/// it is present (e.g. a target column in a labelled test file).
pub fn load_features_csv(path: impl AsRef<Path>, exclude: Option<&str>) -> Result<FeatureMatrix, DataError> {
    let table = read_table(path.as_ref())?;
    let exclude = exclude.and_then(|name| table.header.iter().position(|h| h == name));
    Ok(split_table(table, exclude)?.0)
}

/// Loads one named column of a headed numeric CSV.
pub fn load_column(path: impl AsRef<Path>, column: &str) -> Result<Vec<f64>, DataError> {
    let table = read_table(path.as_ref())?;
    let col = table
        .header
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| DataError::MissingColumn(column.to_string()))?;
    Ok(table.rows.iter().map(|r| r[col]).collect())
}

/// Per-feature sorted upper edges of each bin except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct BinEdges {
    edges: Vec<Vec<f64>>,
}

impl BinEdges {
    /// Wraps precomputed edges, checking they are finite and strictly increasing.
    pub fn new(edges: Vec<Vec<f64>>) -> Result<Self, String> {
        for (j, e) in edges.iter().enumerate() {
            if e.iter().any(|v| !v.is_finite()) {
                return Err(format!("feature {j}: non-finite edge"));
            }
            if e.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("feature {j}: edges not strictly increasing"));
            }
            if e.len() >= MAX_BINS_LIMIT {
                return Err(format!("feature {j}: too many edges"));
            }
        }
        Ok(Self { edges })
    }

    pub fn n_features(&self) -> usize {
        self.edges.len()
    }

    pub fn feature(&self, j: usize) -> &[f64] {
        &self.edges[j]
    }

    pub fn n_bins(&self, j: usize) -> usize {
        self.edges[j].len() + 1
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.edges.iter().map(Vec::as_slice)
    }

    /// Number of edges strictly below `value`.
    #[inline]
    pub fn bin(&self, j: usize, value: f64) -> BinIndex {
        self.edges[j].partition_point(|&e| e < value) as BinIndex
    }
}

/// Edges for one feature.
///
/// Features with at most `max_bins` distinct values get one bin per value.
/// Otherwise edges sit at the lower empirical quantiles `k / max_bins`, with
/// duplicates and edges at the maximum dropped.
pub fn feature_edges(values: &[f64], max_bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() <= max_bins {
        distinct.pop();
        return distinct;
    }
    let n = sorted.len();
    let max = sorted[n - 1];
    let mut edges: Vec<f64> = Vec::with_capacity(max_bins - 1);
    for k in 1..max_bins {
        let q = k as f64 / max_bins as f64;
        let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
        let v = sorted[idx];
        if v < max && edges.last().is_none_or(|&last| v > last) {
            edges.push(v);
        }
    }
    edges
}

/// Computes equal-density bin edges for every feature of the dataset.
pub fn compute_bin_edges(data: &RawDataset, max_bins: usize) -> Result<BinEdges, DataError> {
    compute_feature_edges(&data.features, max_bins)
}

pub fn compute_feature_edges(x: &FeatureMatrix, max_bins: usize) -> Result<BinEdges, DataError> {
    if !(2..=MAX_BINS_LIMIT).contains(&max_bins) {
        return Err(DataError::InvalidMaxBins(max_bins));
    }
    let edges = (0..x.n_features())
        .into_par_iter()
        .map(|j| feature_edges(&x.column(j), max_bins))
        .collect();
    Ok(BinEdges { edges })
}

/// Quantized features, stored column-major, plus the target.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedDataset {
    bins: Vec<Vec<BinIndex>>,
    edges: BinEdges,
    target: Vec<f64>,
    n_samples: usize,
}

impl BinnedDataset {
    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_features(&self) -> usize {
        self.bins.len()
    }

    pub fn edges(&self) -> &BinEdges {
        &self.edges
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    /// Bin indices of one feature across all samples.
    pub fn feature_bins(&self, j: usize) -> &[BinIndex] {
        &self.bins[j]
    }

    #[inline]
    pub fn bin(&self, i: usize, j: usize) -> BinIndex {
        self.bins[j][i]
    }

    pub fn n_bins(&self, j: usize) -> usize {
        self.edges.n_bins(j)
    }
}

/// Quantizes a feature matrix column-major with the given edges.
pub fn bin_features(x: &FeatureMatrix, edges: &BinEdges) -> Result<Vec<Vec<BinIndex>>, DataError> {
    if x.n_features() != edges.n_features() {
        return Err(DataError::FeatureCountMismatch {
            expected: edges.n_features(),
            found: x.n_features(),
        });
    }
    Ok((0..x.n_features())
        .into_par_iter()
        .map(|j| (0..x.n_samples()).map(|i| edges.bin(j, x.get(i, j))).collect())
        .collect())
}

pub fn apply_bins(data: &RawDataset, edges: &BinEdges) -> Result<BinnedDataset, DataError> {
    let bins = bin_features(&data.features, edges)?;
    Ok(BinnedDataset {
        bins,
        edges: edges.clone(),
        target: data.target.clone(),
        n_samples: data.n_samples(),
    })
}
