//! Small classification datasets with features in `[0, 1]`.
//!
//! Generators produce stratified 80/20 train/test splits and are pure
//! functions of their arguments and seed. Synthetic features are scaled by
//! one shared affine map so that distances keep their geometry; tables are
//! scaled per column.
//!
//! # Table format
//!
//! Comma-separated text with a header row. One column, named by the
//! caller, holds integer class labels `0..C` with no gaps; every other
//! column is a numeric feature. Rows containing non-finite values are
//! dropped and their 1-based line numbers reported.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

/// Fraction of each class held out for testing by the generators.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
    origin: String,
}

/// A train/test pair drawn from one source.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplits {
    pub train: Dataset,
    pub test: Dataset,
}

impl DataSplits {
    pub fn classes(&self) -> usize {
        self.train.classes
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        classes: usize,
        split: Split,
        origin: impl Into<String>,
    ) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(Error::dim("dataset", features.shape(), &[labels.len()]));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!("label {y} out of range for {classes} classes")));
        }
        if let Some(v) = features.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("feature value {v} outside [0, 1]")));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            split,
            origin: origin.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Features and labels of the listed rows.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.features.select_rows(idx)?;
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let (x, y) = self.batch(idx)?;
        Ok(Dataset {
            features: x,
            labels: y,
            classes: self.classes,
            split: self.split,
            origin: self.origin.clone(),
        })
    }

    /// Splits per class, holding out `test_fraction` of each class (at
    /// least one instance per class on each side).
    pub fn stratified_split(&self, test_fraction: f64, rng: &mut impl Rng) -> Result<DataSplits> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
        }
        let mut train = Vec::new();
        let mut test = Vec::new();
        for c in 0..self.classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            if members.len() < 2 {
                return Err(Error::Config(format!(
                    "class {c} has {} instance(s); a split needs at least 2",
                    members.len()
                )));
            }
            members.shuffle(rng);
            let n_test = ((members.len() as f64 * test_fraction).round() as usize).clamp(1, members.len() - 1);
            test.extend_from_slice(&members[..n_test]);
            train.extend_from_slice(&members[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        let mut tr = self.subset(&train)?;
        tr.split = Split::Train;
        let mut te = self.subset(&test)?;
        te.split = Split::Test;
        Ok(DataSplits { train: tr, test: te })
    }
}

/// Maps all values of `raw` into `[0, 1]` with one shared affine map.
fn normalize_global(raw: &mut [f64]) {
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    for v in raw.iter_mut() {
        *v = if range > 0.0 { ((*v - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
    }
}

/// Maps each column into `[0, 1]`; constant columns become all zeros.
fn normalize_columns(raw: &mut [f64], cols: usize) {
    for c in 0..cols {
        let col = raw.iter().skip(c).step_by(cols);
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        for v in raw.iter_mut().skip(c).step_by(cols) {
            *v = if range > 0.0 { ((*v - lo) / range).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
}

fn blob_centers(classes: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|k| {
            let mut c = vec![0.0; dim];
            if dim >= 3 && classes <= dim {
                c[k] = 1.0;
            } else {
                let a = TAU * k as f64 / classes as f64;
                c[0] = a.cos();
                c[1] = a.sin();
            }
            c
        })
        .collect()
}

fn min_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d2: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum();
            best = best.min(d2.sqrt());
        }
    }
    best
}

fn finish_generated(
    raw: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
    dim: usize,
    origin: String,
    seed_value: u64,
) -> Result<DataSplits> {
    let mut raw = raw;
    normalize_global(&mut raw);
    let n = labels.len();
    let all = Dataset::new(Tensor::new(vec![n, dim], raw)?, labels, classes, Split::Train, origin)?;
    let mut rng = seed::rng(seed_value, Stream::Data);
    rng.set_word_pos(1 << 40);
    all.stratified_split(TEST_FRACTION, &mut rng)
}

/// `classes` isotropic Gaussian clusters with standard deviation `spread`.
///
/// Centers sit on the unit circle in the first two coordinates, or on the
/// unit simplex vertices `e_k` when `3 <= classes <= dim`.
pub fn gen_blobs(classes: usize, dim: usize, per_class: usize, spread: f64, seed_value: u64) -> Result<DataSplits> {
    if classes < 2 || dim < 2 {
        return Err(Error::Config(format!(
            "blobs need classes >= 2 and dim >= 2 (got {classes}, {dim})"
        )));
    }
    if per_class < 2 {
        return Err(Error::Config("blobs need at least 2 instances per class".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!("spread {spread} must be finite and >= 0")));
    }
    let centers = blob_centers(classes, dim);
    let gap = min_pairwise_distance(&centers);
    if gap < 6.0 * spread {
        return Err(Error::Config(format!(
            "infeasible geometry: {classes} centers are {gap:.4} apart, need >= 6 x spread = {:.4}",
            6.0 * spread
        )));
    }
    let mut rng = seed::rng(seed_value, Stream::Data);
    let mut raw = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &cv in c {
                let z: f64 = rng.sample(StandardNormal);
                raw.push(cv + spread * z);
            }
            labels.push(k);
        }
    }
    let origin = format!("blobs(classes={classes}, dim={dim}, per_class={per_class}, spread={spread}, seed={seed_value})");
    finish_generated(raw, labels, classes, dim, origin, seed_value)
}

/// Two concentric rings (radii 0.5 and 1.0) with Gaussian radial noise.
pub fn gen_rings(classes: usize, per_class: usize, noise: f64, seed_value: u64) -> Result<DataSplits> {
    if classes != 2 {
        return Err(Error::Config(format!("rings are defined for 2 classes, got {classes}")));
    }
    if per_class < 2 {
        return Err(Error::Config("rings need at least 2 instances per class".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("noise {noise} must be finite and >= 0")));
    }
    let mut rng = seed::rng(seed_value, Stream::Data);
    let mut raw = Vec::with_capacity(2 * per_class * 2);
    let mut labels = Vec::with_capacity(2 * per_class);
    for (k, radius) in [0.5, 1.0].into_iter().enumerate() {
        for _ in 0..per_class {
            let angle = rng.random_range(0.0..TAU);
            let z: f64 = rng.sample(StandardNormal);
            let r = radius + noise * z;
            raw.push(r * angle.cos());
            raw.push(r * angle.sin());
            labels.push(k);
        }
    }
    let origin = format!("rings(per_class={per_class}, noise={noise}, seed={seed_value})");
    finish_generated(raw, labels, 2, 2, origin, seed_value)
}

/// Result of [`load_table`].
#[derive(Debug, Clone)]
pub struct LoadedTable {
    pub dataset: Dataset,
    pub feature_names: Vec<String>,
    /// 1-based line numbers (header is line 1) of dropped non-finite rows.
    pub rejected_rows: Vec<usize>,
}

fn parse_error(location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        location: location.into(),
        message: message.into(),
    }
}

/// Reads a delimited numeric table; see the module docs for the format.
pub fn load_table(path: impl AsRef<Path>, label_column: &str) -> Result<LoadedTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_table(&text, label_column, &path.display().to_string())
}

/// [`load_table`] over in-memory text.
pub fn parse_table(text: &str, label_column: &str, origin: &str) -> Result<LoadedTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| parse_error("line 1", e.to_string()))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| parse_error("line 1", format!("no label column named {label_column:?}")))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    if feature_names.is_empty() {
        return Err(parse_error("line 1", "table has no feature columns"));
    }

    let mut raw = Vec::new();
    let mut labels = Vec::new();
    let mut rejected = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| parse_error(format!("line {line}"), e.to_string()))?;
        let mut row = Vec::with_capacity(feature_names.len());
        let mut label = None;
        let mut finite = true;
        for (i, cell) in record.iter().enumerate() {
            let name = &headers[i];
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_error(format!("line {line}, column {name:?}"), format!("not a number: {cell:?}")))?;
            if !v.is_finite() {
                finite = false;
            }
            if i == label_idx {
                label = Some(v);
            } else {
                row.push(v);
            }
        }
        if !finite {
            rejected.push(line);
            continue;
        }
        let v = label.expect("record width checked by the reader");
        if v < 0.0 || v.fract() != 0.0 {
            return Err(parse_error(
                format!("line {line}, column {label_column:?}"),
                format!("label {v} is not a non-negative integer"),
            ));
        }
        labels.push(v as usize);
        raw.extend(row);
    }
    if labels.is_empty() {
        return Err(parse_error(origin, "no usable rows"));
    }
    let classes = labels.iter().max().expect("non-empty") + 1;
    let mut seen = vec![false; classes];
    for &y in &labels {
        seen[y] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(parse_error(
            format!("column {label_column:?}"),
            format!("labels skip class {missing} (labels must cover 0..{classes} without gaps)"),
        ));
    }
    let cols = feature_names.len();
    normalize_columns(&mut raw, cols);
    let n = labels.len();
    let dataset = Dataset::new(Tensor::new(vec![n, cols], raw)?, labels, classes, Split::Train, origin)?;
    Ok(LoadedTable {
        dataset,
        feature_names,
        rejected_rows: rejected,
    })
}

/// Writes `dataset` in the table format with columns `x0..x{d-1}` and
/// `label_column`.
pub fn save_table(dataset: &Dataset, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|i| format!("x{i}")).collect();
    header.push(label_column.to_string());
    w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
    for i in 0..dataset.len() {
        let mut rec: Vec<String> = dataset.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        rec.push(dataset.labels[i].to_string());
        w.write_record(&rec).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
