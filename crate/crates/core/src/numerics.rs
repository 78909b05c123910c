//! Dense numeric kernel: row-major matrices, temperature softmax, entropy,
//! moment statistics and the seeded generator used by every run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Row tolerance for stochastic matrices.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Row-major dense matrix of `f64`. Rows are samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// A batch of input samples, one per row.
pub type Batch = Matrix;

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Like [`Matrix::new`] but additionally rejects empty shapes and
    /// non-finite entries, as required for input batches.
    pub fn batch(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return invalid(format!("batch shape {rows}x{cols} is empty"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("batch contains non-finite values");
        }
        Self::new(rows, cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return invalid("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Selects a subset of rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices with equal column count on top of each other.
    pub fn vstack(parts: &[Matrix]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return invalid("vstack column mismatch");
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let data = parts.iter().flat_map(|m| m.data.iter().copied()).collect();
        Self::new(rows, cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · rhs` where `rhs` is `(cols × out)` row-major.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return invalid(format!(
                "matmul shape mismatch {}x{} · {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(rhs.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ` where `rhs` is `(out × cols)`.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return invalid("matmul_t shape mismatch");
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs`; both share the row count.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return invalid("t_matmul shape mismatch");
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = rhs.row(r);
            for (i, &ai) in a.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let o = out.row_mut(i);
                for (oj, &bj) in o.iter_mut().zip(b) {
                    *oj += ai * bj;
                }
            }
        }
        Ok(out)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Classifier outputs, one row of K class scores per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Matrix);

impl Logits {
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.is_finite() {
            return invalid("logits contain non-finite values");
        }
        Ok(Self(values))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.cols()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.0.row_iter().map(argmax).collect()
    }
}

/// Row-stochastic matrix of class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(Matrix);

impl ProbMatrix {
    /// Validates that every row is a probability vector.
    pub fn new(values: Matrix) -> Result<Self> {
        for (i, row) in values.row_iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return invalid(format!("row {i} has entries outside [0, 1]"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return invalid(format!("row {i} sums to {s}, not 1"));
            }
        }
        Ok(Self(values))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.0.row_iter().map(argmax).collect()
    }
}

/// Softmax of `logits / tau`, row by row, with per-row max subtraction.
pub fn softmax_with_temperature(logits: &Logits, tau: f64) -> Result<ProbMatrix> {
    if !(tau > 0.0 && tau.is_finite()) {
        return invalid(format!("temperature must be positive, got {tau}"));
    }
    let z = logits.matrix();
    if !z.is_finite() {
        return invalid("logits contain non-finite values");
    }
    let mut out = z.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(ProbMatrix(out))
}

/// Entropy of a single probability row in nats, with `0 ln 0 = 0`.
pub fn row_entropy(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    h.max(0.0)
}

/// Per-row Shannon entropy in nats.
pub fn shannon_entropy(probs: &ProbMatrix) -> Result<Vec<f64>> {
    let m = probs.matrix();
    for (i, row) in m.row_iter().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&p| p < 0.0) {
            return invalid(format!("row {i} is not stochastic"));
        }
    }
    let max = (m.cols() as f64).ln();
    Ok(m.row_iter().map(|r| row_entropy(r).min(max)).collect())
}

/// Which entries a set of moments is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// One statistic per column, over all rows.
    Features,
    /// One statistic per (row, group), over the contiguous columns of the
    /// group. Output index is `row * groups + group`.
    Groups(usize),
}

/// Mean and biased variance (divide by count).
pub fn batch_moments(x: &Matrix, axis: Axis) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.rows() == 0 || x.cols() == 0 {
        return invalid("moments of an empty selection");
    }
    match axis {
        Axis::Features => {
            let n = x.rows() as f64;
            let mut mean = vec![0.0; x.cols()];
            for row in x.row_iter() {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; x.cols()];
            for row in x.row_iter() {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - m;
                    *s += d * d;
                }
            }
            var.iter_mut().for_each(|s| *s /= n);
            Ok((mean, var))
        }
        Axis::Groups(groups) => {
            if groups == 0 || !x.cols().is_multiple_of(groups) {
                return invalid(format!(
                    "{} features cannot be split into {groups} groups",
                    x.cols()
                ));
            }
            let size = x.cols() / groups;
            let mut mean = Vec::with_capacity(x.rows() * groups);
            let mut var = Vec::with_capacity(x.rows() * groups);
            for row in x.row_iter() {
                for g in row.chunks_exact(size) {
                    let m = g.iter().sum::<f64>() / size as f64;
                    let v = g.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / size as f64;
                    mean.push(m);
                    var.push(v);
                }
            }
            Ok((mean, var))
        }
    }
}

/// The generator used throughout: ChaCha8, seeded from a `u64`, with an
/// explicit stream id so that independent consumers of one seed never
/// share a sequence.
pub type Rng = ChaCha8Rng;

/// Named stream ids for [`rng_for`].
pub mod streams {
    pub const DATASET: u64 = 1;
    pub const CORRUPTION: u64 = 2;
    pub const INIT: u64 = 3;
    pub const PRETRAIN: u64 = 4;
    pub const STREAM: u64 = 5;
}

pub fn rng_for(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
