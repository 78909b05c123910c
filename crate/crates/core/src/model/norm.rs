use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{batch_moments, Axis, Matrix};

/// Normalization flavour of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Batch normalization.
    Bn,
    /// Batch renormalization.
    Bren,
    /// Group normalization.
    Gn,
    /// Layer normalization.
    Ln,
}

impl NormKind {
    pub const ALL: [NormKind; 4] = [NormKind::Bn, NormKind::Bren, NormKind::Gn, NormKind::Ln];

    /// Whether the layer reads statistics across the batch.
    pub fn uses_batch_stats(self) -> bool {
        matches!(self, NormKind::Bn | NormKind::Bren)
    }

    pub fn name(self) -> &'static str {
        match self {
            NormKind::Bn => "bn",
            NormKind::Bren => "bren",
            NormKind::Gn => "gn",
            NormKind::Ln => "ln",
        }
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for NormKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bn" => Ok(NormKind::Bn),
            "bren" | "brn" => Ok(NormKind::Bren),
            "gn" => Ok(NormKind::Gn),
            "ln" => Ok(NormKind::Ln),
            other => invalid(format!("unknown normalization kind `{other}`")),
        }
    }
}

/// How batch-statistics layers obtain their normalization statistics.
///
/// `Train` and `Adapt` are both "train-stats" modes; they differ only in
/// what a batch renormalization layer does. `Eval` is "frozen-stats".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Source training: current-batch statistics, no running-stat update,
    /// BReN behaves as BN (r = 1, d = 0).
    Train,
    /// Test-time adaptation: BN uses current-batch statistics only; BReN
    /// applies the clipped r/d correction and then updates running stats.
    Adapt,
    /// Running statistics for BN/BReN.
    Eval,
}

/// Batch renormalization correction factors for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RenormFactors {
    pub r: Vec<f64>,
    pub d: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormLayer {
    pub kind: NormKind,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub r_max: f64,
    pub d_max: f64,
    pub groups: usize,
}

/// Internals needed to backpropagate through one normalization call.
#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    /// Normalized activations before the affine transform.
    pub xhat: Matrix,
    pub stats: StatsCache,
}

#[derive(Debug, Clone)]
pub(crate) enum StatsCache {
    /// Statistics over the batch axis; `r` is a stop-gradient scale.
    Batch {
        xtilde: Matrix,
        inv_std: Vec<f64>,
        r: Vec<f64>,
        d: Vec<f64>,
    },
    /// Constant statistics; the map is affine in x.
    Frozen { inv_std: Vec<f64> },
    /// Per-sample statistics over contiguous feature groups.
    Group { inv_std: Vec<f64>, groups: usize },
}

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.01;
pub const DEFAULT_R_MAX: f64 = 3.0;
pub const DEFAULT_D_MAX: f64 = 5.0;

impl NormLayer {
    pub fn new(kind: NormKind, features: usize, groups: usize) -> Result<Self> {
        if features == 0 {
            return invalid("normalization layer needs at least one feature");
        }
        let groups = match kind {
            NormKind::Gn => groups,
            NormKind::Ln => 1,
            _ => 1,
        };
        if groups == 0 || !features.is_multiple_of(groups) {
            return invalid(format!("{features} features not divisible into {groups} groups"));
        }
        Ok(Self {
            kind,
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            r_max: DEFAULT_R_MAX,
            d_max: DEFAULT_D_MAX,
            groups,
        })
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let n = self.features();
        if self.beta.len() != n || self.running_mean.len() != n || self.running_var.len() != n {
            return invalid("normalization parameter lengths disagree");
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return invalid("negative running variance");
        }
        if !(self.eps > 0.0) || !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return invalid("eps must be positive and momentum in (0, 1]");
        }
        if self.r_max < 1.0 || self.d_max < 0.0 {
            return invalid("r_max must be >= 1 and d_max >= 0");
        }
        if self.groups == 0 || !n.is_multiple_of(self.groups) {
            return invalid("feature count not divisible by groups");
        }
        Ok(())
    }

    /// Clipped renormalization factors for the given batch statistics,
    /// measured against the current running statistics.
    pub fn renorm_factors(&self, mean: &[f64], var: &[f64]) -> RenormFactors {
        let mut r = Vec::with_capacity(mean.len());
        let mut d = Vec::with_capacity(mean.len());
        for j in 0..mean.len() {
            let run_std = (self.running_var[j] + self.eps).sqrt();
            let batch_std = (var[j] + self.eps).sqrt();
            r.push((batch_std / run_std).clamp(1.0 / self.r_max, self.r_max));
            d.push(((mean[j] - self.running_mean[j]) / run_std).clamp(-self.d_max, self.d_max));
        }
        RenormFactors { r, d }
    }

    /// Normalizes `x`, returning the output and the backprop cache.
    ///
    /// `renorm` replaces the computed BReN factors; it exists so gradient
    /// oracles can hold them fixed.
    pub(crate) fn normalize(
        &mut self,
        x: &Matrix,
        mode: ForwardMode,
        renorm: Option<&RenormFactors>,
    ) -> Result<(Matrix, NormCache)> {
        let c = self.features();
        if x.cols() != c {
            return invalid(format!(
                "normalization layer expects {c} features, got {}",
                x.cols()
            ));
        }
        if x.rows() == 0 {
            return invalid("empty batch");
        }
        let (xhat, stats) = match (self.kind, mode) {
            (NormKind::Bn | NormKind::Bren, ForwardMode::Eval) => self.frozen(x),
            (NormKind::Bn, _) | (NormKind::Bren, ForwardMode::Train) => {
                let (mean, var) = batch_moments(x, Axis::Features)?;
                let ones = RenormFactors {
                    r: vec![1.0; c],
                    d: vec![0.0; c],
                };
                self.batch_standardize(x, &mean, &var, ones)
            }
            (NormKind::Bren, ForwardMode::Adapt) => {
                let (mean, var) = batch_moments(x, Axis::Features)?;
                let factors = match renorm {
                    Some(f) => {
                        if f.r.len() != c || f.d.len() != c {
                            return invalid("renorm factor length mismatch");
                        }
                        f.clone()
                    }
                    None => self.renorm_factors(&mean, &var),
                };
                let out = self.batch_standardize(x, &mean, &var, factors);
                let m = self.momentum;
                for j in 0..c {
                    self.running_mean[j] = (1.0 - m) * self.running_mean[j] + m * mean[j];
                    self.running_var[j] = (1.0 - m) * self.running_var[j] + m * var[j];
                }
                out
            }
            (NormKind::Gn | NormKind::Ln, _) => self.group_standardize(x)?,
        };
        let mut y = xhat.clone();
        for i in 0..y.rows() {
            for ((v, g), b) in y.row_mut(i).iter_mut().zip(&self.gamma).zip(&self.beta) {
                *v = *v * g + b;
            }
        }
        Ok((y, NormCache { xhat, stats }))
    }

    fn frozen(&self, x: &Matrix) -> (Matrix, StatsCache) {
        let inv_std: Vec<f64> = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        let mut xhat = x.clone();
        for i in 0..xhat.rows() {
            for (j, v) in xhat.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.running_mean[j]) * inv_std[j];
            }
        }
        (xhat, StatsCache::Frozen { inv_std })
    }

    fn batch_standardize(
        &self,
        x: &Matrix,
        mean: &[f64],
        var: &[f64],
        factors: RenormFactors,
    ) -> (Matrix, StatsCache) {
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xtilde = x.clone();
        for i in 0..xtilde.rows() {
            for (j, v) in xtilde.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let mut xhat = xtilde.clone();
        for i in 0..xhat.rows() {
            for (j, v) in xhat.row_mut(i).iter_mut().enumerate() {
                *v = *v * factors.r[j] + factors.d[j];
            }
        }
        let RenormFactors { r, d } = factors;
        (
            xhat,
            StatsCache::Batch {
                xtilde,
                inv_std,
                r,
                d,
            },
        )
    }

    fn group_standardize(&self, x: &Matrix) -> Result<(Matrix, StatsCache)> {
        let groups = self.groups;
        let (mean, var) = batch_moments(x, Axis::Groups(groups))?;
        let size = x.cols() / groups;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = x.clone();
        for i in 0..xhat.rows() {
            for (j, v) in xhat.row_mut(i).iter_mut().enumerate() {
                let k = i * groups + j / size;
                *v = (*v - mean[k]) * inv_std[k];
            }
        }
        Ok((xhat, StatsCache::Group { inv_std, groups }))
    }

    /// Returns `(dx, dgamma, dbeta)`. `dx` is skipped when `need_dx` is false.
    pub(crate) fn backward(
        &self,
        cache: &NormCache,
        dy: &Matrix,
        need_dx: bool,
    ) -> (Option<Matrix>, Vec<f64>, Vec<f64>) {
        let c = self.features();
        let b = dy.rows();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for i in 0..b {
            for j in 0..c {
                let g = dy.get(i, j);
                dgamma[j] += g * cache.xhat.get(i, j);
                dbeta[j] += g;
            }
        }
        if !need_dx {
            return (None, dgamma, dbeta);
        }
        let mut dx = dy.clone();
        match &cache.stats {
            StatsCache::Frozen { inv_std } => {
                for i in 0..b {
                    for (j, v) in dx.row_mut(i).iter_mut().enumerate() {
                        *v *= self.gamma[j] * inv_std[j];
                    }
                }
            }
            StatsCache::Batch {
                xtilde, inv_std, r, ..
            } => {
                let n = b as f64;
                let mut sum = vec![0.0; c];
                let mut sum_x = vec![0.0; c];
                for i in 0..b {
                    for j in 0..c {
                        let g = dy.get(i, j) * self.gamma[j] * r[j];
                        sum[j] += g;
                        sum_x[j] += g * xtilde.get(i, j);
                    }
                }
                for i in 0..b {
                    for (j, v) in dx.row_mut(i).iter_mut().enumerate() {
                        let g = *v * self.gamma[j] * r[j];
                        *v = inv_std[j] / n * (n * g - sum[j] - xtilde.get(i, j) * sum_x[j]);
                    }
                }
            }
            StatsCache::Group { inv_std, groups } => {
                let size = c / groups;
                let n = size as f64;
                for i in 0..b {
                    let xrow = cache.xhat.row(i);
                    let dxrow = dx.row_mut(i);
                    for g in 0..*groups {
                        let range = g * size..(g + 1) * size;
                        let mut sum = 0.0;
                        let mut sum_x = 0.0;
                        for j in range.clone() {
                            let d = dxrow[j] * self.gamma[j];
                            sum += d;
                            sum_x += d * xrow[j];
                        }
                        let s = inv_std[i * groups + g];
                        for j in range {
                            let d = dxrow[j] * self.gamma[j];
                            dxrow[j] = s / n * (n * d - sum - xrow[j] * sum_x);
                        }
                    }
                }
            }
        }
        (Some(dx), dgamma, dbeta)
    }
}
