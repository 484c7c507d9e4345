//! Feature and label containers, input validation and centering.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

/// Dense row-major `M x m` matrix of per-sample embeddings.
///
/// Row `i` is the embedding of sample `i`; that order is the canonical sample
/// index order for the whole run. Selection code only ever refers to rows by
/// index.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl FeatureMatrix {
    /// Wraps row-major `data`. Only the shape is checked here; finiteness and
    /// non-emptiness are reported by [`validate_inputs`].
    pub fn new(data: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Shape { rows, cols, len: data.len() });
        }
        Ok(Self { data, rows, cols })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape { rows: rows.len(), cols, len: data.len() + r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(data, rows.len(), cols)
    }

    /// Number of samples `M`.
    #[inline]
    pub fn num_samples(&self) -> usize {
        self.rows
    }

    /// Embedding dimension `m`.
    #[inline]
    pub fn dim(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(if self.cols == 0 { 0 } else { self.rows })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn gather(&self, indices: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix { data, rows: indices.len(), cols: self.cols }
    }

    /// Column means, summed in row order.
    pub fn column_means(&self) -> Vec<f64> {
        mean_of_rows(self, 0..self.rows)
    }

    /// `‖f(x_i)‖²` for every row, accumulated in column order.
    pub fn squared_norms(&self) -> Vec<f64> {
        self.rows().map(|r| crate::math::dot(r, r)).collect()
    }
}

pub(crate) fn mean_of_rows(features: &FeatureMatrix, rows: impl IntoIterator<Item = usize>) -> Vec<f64> {
    let mut sum = vec![0.0; features.dim()];
    let mut n = 0usize;
    for i in rows {
        for (s, v) in sum.iter_mut().zip(features.row(i)) {
            *s += v;
        }
        n += 1;
    }
    if n > 0 {
        let inv = n as f64;
        sum.iter_mut().for_each(|s| *s /= inv);
    }
    sum
}

/// Integer class id per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    labels: Vec<i64>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<i64>, num_classes: usize) -> Self {
        Self { labels, num_classes }
    }

    /// Takes `num_classes` as one past the largest label (0 when empty or all
    /// negative; negative labels are reported by [`validate_inputs`]).
    pub fn from_labels(labels: Vec<i64>) -> Self {
        let num_classes = labels.iter().copied().max().map_or(0, |m| (m.max(-1) + 1) as usize);
        Self { labels, num_classes }
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Global sample indices of each class present, classes ascending.
    pub fn strata(&self) -> Vec<(i64, Vec<usize>)> {
        let mut by_class: alloc::collections::BTreeMap<i64, Vec<usize>> = Default::default();
        for (i, &l) in self.labels.iter().enumerate() {
            by_class.entry(l).or_default().push(i);
        }
        by_class.into_iter().collect()
    }
}

/// One problem found by [`validate_inputs`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyMatrix { rows: usize, cols: usize },
    NonFinite { row: usize, col: usize },
    LabelLength { labels: usize, samples: usize },
    LabelOutOfRange { index: usize, label: i64, num_classes: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyMatrix { rows, cols } => write!(f, "empty matrix ({rows}x{cols})"),
            Violation::NonFinite { row, col } => write!(f, "non-finite at row {row} col {col}"),
            Violation::LabelLength { labels, samples } => {
                write!(f, "label length {labels} ≠ {samples} samples")
            }
            Violation::LabelOutOfRange { index, label, num_classes } => {
                write!(f, "label {label} at sample {index} outside [0, {num_classes})")
            }
        }
    }
}

/// Result of [`validate_inputs`]. Empty means the inputs are usable.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Violations found beyond [`ValidationReport::MAX_LISTED`] are counted, not listed.
    pub truncated: usize,
}

impl ValidationReport {
    pub const MAX_LISTED: usize = 64;

    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, v: Violation) {
        if self.violations.len() < Self::MAX_LISTED {
            self.violations.push(v);
        } else {
            self.truncated += 1;
        }
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(Error::Invalid(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        if self.truncated > 0 {
            write!(f, "; and {} more", self.truncated)?;
        }
        Ok(())
    }
}

/// Checks a feature matrix (and optional labels) without modifying either.
pub fn validate_inputs(features: &FeatureMatrix, labels: Option<&LabelVector>) -> ValidationReport {
    let mut report = ValidationReport::default();
    let (rows, cols) = (features.num_samples(), features.dim());
    if rows == 0 || cols == 0 {
        report.push(Violation::EmptyMatrix { rows, cols });
    }
    for (i, v) in features.as_slice().iter().enumerate() {
        if !v.is_finite() {
            report.push(Violation::NonFinite { row: i / cols, col: i % cols });
        }
    }
    if let Some(labels) = labels {
        if labels.len() != rows {
            report.push(Violation::LabelLength { labels: labels.len(), samples: rows });
        }
        for (index, &label) in labels.labels().iter().enumerate() {
            if label < 0 || label as u64 >= labels.num_classes() as u64 {
                report.push(Violation::LabelOutOfRange { index, label, num_classes: labels.num_classes() });
            }
        }
    }
    report
}

/// Subtracts the column means; returns the centered matrix and the mean.
pub fn center_features(features: &FeatureMatrix) -> (FeatureMatrix, Vec<f64>) {
    let mean = features.column_means();
    let mut data = features.as_slice().to_vec();
    if features.dim() > 0 {
        for row in data.chunks_exact_mut(features.dim()) {
            for (v, m) in row.iter_mut().zip(&mean) {
                *v -= m;
            }
        }
    }
    (FeatureMatrix { data, rows: features.rows, cols: features.cols }, mean)
}
