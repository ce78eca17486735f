//! CSV ingestion and feature normalization.

use std::fs::File;
use std::path::Path;

use fedsim_core::Dataset;
use serde::Serialize;

use crate::error::{Error, Result};

/// Raw table read from a CSV file: numeric features plus the label column as
/// written.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub feature_names: Vec<String>,
    pub features: Vec<f64>,
    pub labels: Vec<String>,
}

impl RawTable {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }
}

fn data_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Data { path: path.to_path_buf(), message: message.into() }
}

/// Reads a headered CSV file. Every column except `label_column` must be
/// numeric. Row numbers in errors count data rows from 1, header excluded.
pub fn read_table(path: &Path, label_column: &str) -> Result<RawTable> {
    let file = File::open(path).map_err(|source| Error::Read { path: path.to_path_buf(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers().map_err(|e| data_error(path, format!("bad header: {e}")))?.clone();
    if headers.is_empty() {
        return Err(data_error(path, "empty file"));
    }
    let label_at = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| data_error(path, format!("no column named `{label_column}`")))?;
    let feature_names: Vec<String> =
        headers.iter().enumerate().filter(|&(i, _)| i != label_at).map(|(_, h)| h.trim().to_string()).collect();

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| data_error(path, format!("row {row}: {e}")))?;
        for (j, cell) in record.iter().enumerate() {
            if j == label_at {
                labels.push(cell.trim().to_string());
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| {
                data_error(path, format!("row {row}: column `{}` is not numeric: {cell:?}", &headers[j]))
            })?;
            if !v.is_finite() {
                return Err(data_error(path, format!("row {row}: column `{}` is not finite", &headers[j])));
            }
            features.push(v);
        }
    }
    if labels.is_empty() {
        return Err(data_error(path, "no data rows"));
    }
    Ok(RawTable { feature_names, features, labels })
}

/// Dense label ids. Integer labels keep their numeric order; anything else is
/// sorted as text.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelMap {
    pub names: Vec<String>,
}

impl LabelMap {
    pub fn fit(labels: &[String]) -> LabelMap {
        let mut names: Vec<String> = labels.to_vec();
        if names.iter().all(|l| l.parse::<i64>().is_ok()) {
            names.sort_by_key(|l| l.parse::<i64>().unwrap_or_default());
        } else {
            names.sort();
        }
        names.dedup();
        LabelMap { names }
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.names.iter().position(|n| n == label)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Per-feature mean and standard deviation. Constant columns keep a divisor
/// of 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Normalization {
    pub feature_names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Normalization {
    pub fn fit(table: &RawTable) -> Normalization {
        let (n, d) = (table.rows() as f64, table.dim());
        let mut means = vec![0.0; d];
        for row in table.features.chunks(d) {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n);
        let mut stds = vec![0.0; d];
        for row in table.features.chunks(d) {
            for ((s, v), m) in stds.iter_mut().zip(row).zip(&means) {
                *s += (v - m) * (v - m);
            }
        }
        for s in stds.iter_mut() {
            *s = (*s / n).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        Normalization { feature_names: table.feature_names.clone(), means, stds }
    }

    pub fn apply(&self, features: &[f64]) -> Vec<f64> {
        let d = self.means.len();
        features.iter().enumerate().map(|(i, v)| (v - self.means[i % d]) / self.stds[i % d]).collect()
    }
}

/// Builds a classification dataset from a table, normalizing features and
/// mapping labels with the given map.
pub fn to_dataset(path: &Path, table: &RawTable, labels: &LabelMap, norm: &Normalization) -> Result<Dataset> {
    let ids = table
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| labels.id(l).ok_or_else(|| data_error(path, format!("row {}: unseen label {l:?}", i + 1))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::classification(norm.apply(&table.features), table.dim(), ids, labels.len())?)
}

/// Loads a CSV file as a normalized classification dataset, with labels
/// re-indexed densely from 0.
pub fn load_csv(path: &Path, label_column: &str) -> Result<(Dataset, LabelMap, Normalization)> {
    let table = read_table(path, label_column)?;
    let labels = LabelMap::fit(&table.labels);
    let norm = Normalization::fit(&table);
    let dataset = to_dataset(path, &table, &labels, &norm)?;
    Ok((dataset, labels, norm))
}
