//! Supervised source training.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ArchSpec, ForwardMode, GradScope, Layer, LayerGrad, ModelState};
use crate::error::{invalid, Result};
use crate::numerics::{batch_moments, rng_for, softmax_with_temperature, streams, Axis, Matrix};
use crate::stream::LabeledDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Heavy-ball momentum.
    pub momentum: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Trains a fresh `arch` model with cross-entropy on `source`.
///
/// Normalization layers use current-batch statistics during training.
/// Afterwards the running statistics of batch-statistics layers are set to
/// the exact moments of the whole source set, then left frozen.
pub fn pretrain(source: &LabeledDataset, arch: ArchSpec, cfg: &PretrainConfig) -> Result<ModelState> {
    if source.class_counts().iter().filter(|&&c| c > 0).count() < 2 {
        return invalid("source data must contain at least two classes");
    }
    if arch.num_classes != source.num_classes || arch.input_dim != source.dim() {
        return invalid("architecture does not match the source data");
    }
    if cfg.batch_size < 2 {
        return invalid("pretraining batch size must be at least 2");
    }
    let mut model = ModelState::init(arch, cfg.seed)?;
    let mut velocity: Vec<LayerGrad> = vec![LayerGrad::None; model.layers.len()];
    let mut rng = rng_for(cfg.seed, streams::PRETRAIN);
    let mut order: Vec<usize> = (0..source.len()).collect();
    let k = source.num_classes;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        // Incomplete trailing batches are dropped; a single-sample batch
        // has no usable batch statistics.
        for chunk in order.chunks_exact(cfg.batch_size.min(source.len())) {
            let x = source.features.select_rows(chunk);
            let (logits, cache) = model.forward(&x, ForwardMode::Train)?;
            let probs = softmax_with_temperature(&logits, 1.0)?;
            let b = chunk.len() as f64;
            let mut dl = probs.matrix().clone();
            for (row, &i) in chunk.iter().enumerate() {
                dl.row_mut(row)[source.labels[i]] -= 1.0;
            }
            dl.as_mut_slice().iter_mut().for_each(|v| *v /= b);
            debug_assert_eq!(dl.cols(), k);
            let grads = model.backward(cache, &dl, GradScope::All)?;
            apply_momentum(&mut model, &mut velocity, grads.layers, cfg);
        }
    }
    calibrate_running_stats(&mut model, &source.features)?;
    Ok(model)
}

fn apply_momentum(
    model: &mut ModelState,
    velocity: &mut [LayerGrad],
    grads: Vec<LayerGrad>,
    cfg: &PretrainConfig,
) {
    let step = |p: &mut [f64], v: &mut Vec<f64>, g: &[f64]| {
        if v.len() != g.len() {
            *v = vec![0.0; g.len()];
        }
        for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *v = cfg.momentum * *v + g;
            *p -= cfg.lr * *v;
        }
    };
    for ((layer, vel), g) in model.layers.iter_mut().zip(velocity).zip(grads) {
        match (layer, g) {
            (Layer::Linear(lin), LayerGrad::Linear { weight, bias }) => {
                if !matches!(vel, LayerGrad::Linear { .. }) {
                    *vel = LayerGrad::Linear {
                        weight: Matrix::zeros(weight.rows(), weight.cols()),
                        bias: vec![0.0; bias.len()],
                    };
                }
                if let LayerGrad::Linear { weight: vw, bias: vb } = vel {
                    let mut vwv = std::mem::take(vw).into_vec();
                    step(lin.weight.as_mut_slice(), &mut vwv, weight.as_slice());
                    *vw = Matrix::new(weight.rows(), weight.cols(), vwv).expect("shape");
                    step(&mut lin.bias, vb, &bias);
                }
            }
            (Layer::Norm(n), LayerGrad::Norm { gamma, beta }) => {
                if !matches!(vel, LayerGrad::Norm { .. }) {
                    *vel = LayerGrad::Norm {
                        gamma: vec![0.0; gamma.len()],
                        beta: vec![0.0; beta.len()],
                    };
                }
                if let LayerGrad::Norm { gamma: vg, beta: vb } = vel {
                    step(&mut n.gamma, vg, &gamma);
                    step(&mut n.beta, vb, &beta);
                }
            }
            _ => {}
        }
    }
}

/// Sets each batch-statistics layer's running moments to the moments of
/// its input over all of `x`.
fn calibrate_running_stats(model: &mut ModelState, x: &Matrix) -> Result<()> {
    let mut h = x.clone();
    for layer in &mut model.layers {
        if let Layer::Norm(n) = layer {
            if n.kind.uses_batch_stats() {
                let (mean, var) = batch_moments(&h, Axis::Features)?;
                n.running_mean = mean;
                n.running_var = var;
            }
        }
        h = match layer {
            Layer::Linear(lin) => lin.forward(&h)?,
            Layer::Norm(n) => n.normalize(&h, ForwardMode::Eval, None)?.0,
            Layer::Relu => {
                let mut y = h;
                y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                y
            }
        };
    }
    Ok(())
}

/// Frozen-statistics accuracy of `model` on `data`.
pub fn accuracy(model: &ModelState, data: &LabeledDataset) -> Result<f64> {
    let preds = model.predict(&data.features)?;
    let correct = preds.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.len() as f64)
}
