//! Test streams: synthetic labeled data, corruptions, and the ordered,
//! optionally label-imbalanced sampling schedule.
//!
//! At step `t` of `T` the labels are drawn from `Q_t`, a distribution that
//! puts `q_max = ρ / (ρ + K − 1)` on class `t` and spreads the rest evenly,
//! so that `q_max / q_min = ρ`.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{rng_for, streams, Batch, Matrix};

/// Imbalance ratio used in place of an infinite one.
pub const IMBALANCE_INF: f64 = 500_000.0;

/// Radius of the sphere that synthetic class means are placed on.
pub const SYNTH_RADIUS: f64 = 3.0;

/// Features and integer labels in `[0, K)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return invalid("feature rows and labels differ in length");
        }
        if num_classes < 2 {
            return invalid("need at least two classes");
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return invalid(format!("label {bad} out of range for {num_classes} classes"));
        }
        if labels.len() < num_classes {
            return invalid("fewer samples than classes");
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Sample indices grouped by class.
    pub fn class_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            pools[l].push(i);
        }
        pools
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_pools().iter().map(Vec::len).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Splits each class's samples alternately into two datasets, so both
    /// halves keep every class and the original order.
    pub fn split_alternate(&self) -> (Self, Self) {
        let mut seen = vec![0usize; self.num_classes];
        let (mut even, mut odd) = (Vec::new(), Vec::new());
        for (i, &y) in self.labels.iter().enumerate() {
            if seen[y].is_multiple_of(2) {
                even.push(i);
            } else {
                odd.push(i);
            }
            seen[y] += 1;
        }
        (self.subset(&even), self.subset(&odd))
    }
}

/// `K` Gaussian clusters with `n_per_class` points each. Cluster means are
/// random directions scaled to [`SYNTH_RADIUS`]; `spread` is the per-feature
/// standard deviation around each mean. Samples are interleaved by class.
pub fn synth_dataset(
    num_classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 || dim < 2 {
        return invalid("synthetic data needs K >= 2 and D >= 2");
    }
    if n_per_class == 0 || !(spread >= 0.0) {
        return invalid("n_per_class must be positive and spread non-negative");
    }
    let mut rng = rng_for(seed, streams::DATASET);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter().map(|a| a / norm * SYNTH_RADIUS).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(num_classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * n_per_class);
    for _ in 0..n_per_class {
        for (k, mean) in means.iter().enumerate() {
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + spread * z);
            }
            labels.push(k);
        }
    }
    let features = Matrix::new(labels.len(), dim, data)?;
    LabeledDataset::new(features, labels, num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    None,
    GaussianNoise,
    FeatureScale,
    FeatureRotate,
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "gaussian_noise" => Ok(Self::GaussianNoise),
            "feature_scale" => Ok(Self::FeatureScale),
            "feature_rotate" => Ok(Self::FeatureRotate),
            other => invalid(format!("unknown corruption kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub const NONE: CorruptionSpec = CorruptionSpec {
        kind: CorruptionKind::None,
        severity: 1,
    };

    fn level(&self) -> Result<usize> {
        if !(1..=5).contains(&self.severity) {
            return invalid(format!("severity {} outside 1..=5", self.severity));
        }
        Ok(self.severity as usize - 1)
    }

    /// Noise standard deviation per severity.
    pub fn noise_std(&self) -> Result<f64> {
        Ok([0.1, 0.25, 0.5, 0.75, 1.0][self.level()?])
    }

    /// Multiplicative feature scale per severity.
    pub fn scale(&self) -> Result<f64> {
        Ok([1.25, 1.5, 2.0, 2.5, 3.0][self.level()?])
    }

    /// Rotation angle in radians per severity (5°, 10°, 20°, 30°, 45°).
    pub fn angle(&self) -> Result<f64> {
        Ok([5.0f64, 10.0, 20.0, 30.0, 45.0][self.level()?].to_radians())
    }
}

/// Applies a corruption to the features; labels are untouched.
pub fn apply_corruption(
    data: &LabeledDataset,
    spec: &CorruptionSpec,
    seed: u64,
) -> Result<LabeledDataset> {
    spec.level()?;
    let mut out = data.clone();
    let mut rng = rng_for(seed, streams::CORRUPTION);
    match spec.kind {
        CorruptionKind::None => {}
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0, spec.noise_std()?)
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for v in out.features.as_mut_slice() {
                *v += normal.sample(&mut rng);
            }
        }
        CorruptionKind::FeatureScale => {
            let s = spec.scale()?;
            out.features.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        }
        CorruptionKind::FeatureRotate => {
            let rot = rotation(data.dim(), spec.angle()?, &mut rng);
            out.features = data.features.matmul_t(&rot)?;
        }
    }
    Ok(out)
}

/// `Q R(θ) Qᵀ` for a random orthonormal basis `Q`: rotates every vector by
/// `θ` within `⌊D/2⌋` mutually orthogonal random planes.
fn rotation(dim: usize, theta: f64, rng: &mut impl Rng) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    // Rotation in the basis coordinates.
    let (s, c) = theta.sin_cos();
    let mut m = Matrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            let mut acc = 0.0;
            for p in (0..dim - 1).step_by(2) {
                let (u, v) = (&basis[p], &basis[p + 1]);
                acc += c * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j]);
            }
            if dim % 2 == 1 {
                let w = &basis[dim - 1];
                acc += w[i] * w[j];
            }
            m.as_mut_slice()[i * dim + j] = acc;
        }
    }
    m
}

/// Sampling schedule of a test stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub num_classes: usize,
    /// `q_max / q_min`; values at or above [`IMBALANCE_INF`] (including
    /// infinity) are treated as [`IMBALANCE_INF`].
    pub imbalance: f64,
    pub samples_per_step: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Number of steps; defaults to the class count.
    pub steps: Option<usize>,
}

impl StreamSpec {
    pub fn steps(&self) -> usize {
        self.steps.unwrap_or(self.num_classes)
    }

    fn validate(&self) -> Result<()> {
        if !(self.imbalance >= 1.0) {
            return invalid(format!("imbalance ratio {} < 1", self.imbalance));
        }
        if self.batch_size == 0 || self.samples_per_step == 0 {
            return invalid("batch size and samples per step must be positive");
        }
        Ok(())
    }
}

/// Clamps the infinity sentinel.
pub fn effective_imbalance(rho: f64) -> f64 {
    if rho >= IMBALANCE_INF {
        IMBALANCE_INF
    } else {
        rho
    }
}

/// Class distribution for step `t` (1-based) of the imbalanced schedule.
pub fn build_qt(t: usize, num_classes: usize, rho: f64) -> Result<Vec<f64>> {
    if num_classes < 2 {
        return invalid("need at least two classes");
    }
    if t == 0 || t > num_classes {
        return invalid(format!("step {t} outside 1..={num_classes}"));
    }
    if !(rho >= 1.0) {
        return invalid(format!("imbalance ratio {rho} < 1"));
    }
    let rho = effective_imbalance(rho);
    let k = num_classes as f64;
    let q_max = rho / (rho + k - 1.0);
    let q_min = 1.0 / (rho + k - 1.0);
    let mut q = vec![q_min; num_classes];
    q[t - 1] = q_max;
    Ok(q)
}

/// One batch of the stream, with its ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub x: Batch,
    pub labels: Vec<usize>,
}

/// An ordered test stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TestStream {
    /// Dataset row indices in stream order.
    pub order: Vec<usize>,
    pub batches: Vec<StreamBatch>,
}

impl TestStream {
    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.batches.iter().flat_map(|b| b.labels.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Draws `samples_per_step` labels from `Q_t` for each step, takes instances
/// of those labels (from a shuffled per-class pool, falling back to
/// sampling with replacement once a pool runs out) and cuts the sequence
/// into batches in order. The last batch may be short.
pub fn generate_stream(data: &LabeledDataset, spec: &StreamSpec) -> Result<TestStream> {
    spec.validate()?;
    if spec.num_classes != data.num_classes {
        return invalid("stream class count differs from dataset");
    }
    let mut pools = data.class_pools();
    if let Some(k) = pools.iter().position(Vec::is_empty) {
        return invalid(format!("dataset has no samples of class {k}"));
    }
    let mut rng = rng_for(spec.seed, streams::STREAM);
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let mut cursor = vec![0usize; pools.len()];
    let k = spec.num_classes;
    let mut order = Vec::with_capacity(spec.steps() * spec.samples_per_step);
    for step in 0..spec.steps() {
        let q = build_qt(step % k + 1, k, spec.imbalance)?;
        for _ in 0..spec.samples_per_step {
            let label = sample_categorical(&q, &mut rng);
            let pool = &pools[label];
            let idx = if cursor[label] < pool.len() {
                cursor[label] += 1;
                pool[cursor[label] - 1]
            } else {
                pool[rng.random_range(0..pool.len())]
            };
            order.push(idx);
        }
    }
    let batches = order
        .chunks(spec.batch_size)
        .map(|chunk| StreamBatch {
            x: data.features.select_rows(chunk),
            labels: chunk.iter().map(|&i| data.labels[i]).collect(),
        })
        .collect();
    Ok(TestStream { order, batches })
}

fn sample_categorical(q: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in q.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    q.len() - 1
}

/// Reads a CSV with a header row, one `label` column and numeric feature
/// columns. The class count is `max(label) + 1`.
pub fn read_csv(path: &Path) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path)?;
    read_csv_from(file, path)
}

fn read_csv_from(reader: impl std::io::Read, path: &Path) -> Result<LabeledDataset> {
    let err = |line: u64, message: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    let columns: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let label_col = *columns
        .get("label")
        .ok_or_else(|| err(1, "header has no `label` column".into()))?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(err(1, "no feature columns".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (n, record) in rdr.records().enumerate() {
        let line = n as u64 + 2;
        let record = record.map_err(|e| err(line, e.to_string()))?;
        if record.len() != headers.len() {
            return Err(err(
                line,
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        for (i, field) in record.iter().enumerate() {
            let field = field.trim();
            if i == label_col {
                let l: usize = field
                    .parse()
                    .map_err(|_| err(line, format!("label `{field}` is not a non-negative integer")))?;
                labels.push(l);
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| err(line, format!("column {} value `{field}` is not a number", i + 1)))?;
                if !v.is_finite() {
                    return Err(err(line, format!("column {} value is not finite", i + 1)));
                }
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(err(2, "no data rows".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let features = Matrix::new(labels.len(), dim, data)?;
    LabeledDataset::new(features, labels, k)
}
