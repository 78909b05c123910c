//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use tta_forge::model::{
    ArchSpec, ForwardMode, GradScope, Layer, ModelState, NormKind, RenormFactors,
};
use tta_forge::numerics::{rng_for, Matrix};

pub const K: usize = 5;
pub const D: usize = 6;

/// Two-norm-layer model with randomized affine parameters. BReN layers
/// get running statistics that differ from any batch's, so `r` and `d`
/// are not trivially 1 and 0.
pub fn small_model(kind: NormKind, seed: u64) -> ModelState {
    let arch = ArchSpec {
        input_dim: D,
        hidden: vec![8, 8],
        num_classes: K,
        norm: kind,
        groups: 2,
    };
    let mut m = ModelState::init(arch, seed).unwrap();
    let mut rng = rng_for(seed, 1000);
    for layer in &mut m.layers {
        if let Layer::Norm(n) = layer {
            for g in &mut n.gamma {
                *g = rng.random_range(0.5..1.5);
            }
            for b in &mut n.beta {
                *b = rng.random_range(-0.5..0.5);
            }
            for v in &mut n.running_mean {
                *v = rng.random_range(-0.5..0.5);
            }
            for v in &mut n.running_var {
                *v = rng.random_range(0.5..2.0);
            }
        }
    }
    m
}

pub fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = rng_for(seed, 1001);
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// The entropy objective with everything but the parameters held fixed.
#[derive(Debug, Clone)]
pub struct Objective {
    pub tau: f64,
    pub weights: Vec<f64>,
    pub selected: Vec<bool>,
}

impl Objective {
    pub fn plain(batch: usize) -> Self {
        Self {
            tau: 1.0,
            weights: vec![1.0; batch],
            selected: vec![true; batch],
        }
    }

    /// Loss from raw logits, written out directly.
    pub fn eval(&self, logits: &Matrix) -> f64 {
        let mut sum = 0.0;
        let mut count = 0;
        for (i, row) in logits.row_iter().enumerate() {
            if !self.selected[i] {
                continue;
            }
            count += 1;
            sum += self.weights[i] * entropy(&softmax(row, self.tau));
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

pub fn softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Loss at the model's current parameters, with BReN factors frozen.
pub fn loss_at(
    model: &ModelState,
    x: &Matrix,
    obj: &Objective,
    factors: &[Option<RenormFactors>],
) -> f64 {
    let mut m = model.clone();
    let (logits, _) = m
        .forward_with_renorm(x, ForwardMode::Adapt, Some(factors))
        .unwrap();
    obj.eval(logits.matrix())
}

/// Central differences over every adaptable coordinate.
pub fn fd_gradient(
    model: &ModelState,
    x: &Matrix,
    obj: &Objective,
    factors: &[Option<RenormFactors>],
    h: f64,
) -> Vec<f64> {
    model
        .adaptable_params()
        .into_iter()
        .map(|id| {
            let mut plus = model.clone();
            *plus.param_mut(id) += h;
            let mut minus = model.clone();
            *minus.param_mut(id) -= h;
            (loss_at(&plus, x, obj, factors) - loss_at(&minus, x, obj, factors)) / (2.0 * h)
        })
        .collect()
}

/// Analytic gradient plus the BReN factors realized by the forward pass.
pub fn analytic_gradient(
    model: &ModelState,
    x: &Matrix,
    obj: &Objective,
) -> (Vec<f64>, Vec<Option<RenormFactors>>) {
    let mut m = model.clone();
    let (logits, cache) = m.forward(x, ForwardMode::Adapt).unwrap();
    let factors = cache.renorm_factors();
    let probs = tta_forge::numerics::softmax_with_temperature(&logits, obj.tau).unwrap();
    let g = m
        .backward_entropy(cache, &probs, obj.tau, &obj.weights, &obj.selected)
        .unwrap();
    let ids = model.adaptable_params();
    (ids.into_iter().map(|id| g.get(id)).collect(), factors)
}

/// Relative error with a floor of 1e-4 on the denominator. Coordinates
/// whose true gradient is zero (dead ReLU units) come out of central
/// differences as pure roundoff, about `eps * loss / h` = 5e-11 at
/// `h = 1e-6`; below the floor the check is absolute agreement to 1e-9.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// One Tent step spelled out without the adaptation module: mean entropy
/// at unit temperature over the whole batch, then plain SGD on every
/// adaptable parameter.
pub fn reference_tent_step(model: &mut ModelState, x: &Matrix, lr: f64) {
    let (logits, cache) = model.forward(x, ForwardMode::Adapt).unwrap();
    let z = logits.matrix();
    let b = z.rows() as f64;
    let mut dz = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let p = softmax(z.row(i), 1.0);
        let h = entropy(&p);
        for (j, &pj) in p.iter().enumerate() {
            let lp = if pj > 0.0 { pj.ln() } else { 0.0 };
            dz.row_mut(i)[j] = -pj * (lp + h) / b;
        }
    }
    let g = model.backward(cache, &dz, GradScope::Adaptable).unwrap();
    for id in model.adaptable_params() {
        *model.param_mut(id) -= lr * g.get(id);
    }
}
