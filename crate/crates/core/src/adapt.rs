//! Online entropy-minimization adaptation and the tricks composed around it:
//! class rebalancing (DOT) with a single-sample weight buffer,
//! entropy-threshold sample selection, temperature scaling and batch
//! renormalization.
//!
//! With every trick off and unit temperature a step is plain Tent: forward
//! on the current batch, mean prediction entropy, one SGD step on the
//! normalization scale and shift.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::eval::{OnlineAccuracy, TraceRecord};
use crate::model::{weighted_entropy_loss, ForwardMode, ModelState, NormKind};
use crate::numerics::{argmax, shannon_entropy, softmax_with_temperature, Batch, ProbMatrix};
use crate::stream::TestStream;

/// Temperature selected on validation corruptions for all backbones.
pub const DEFAULT_TEMPERATURE: f64 = 1.2;

/// Adaptation hyperparameters and trick switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub lr: f64,
    /// Selection threshold as a fraction of `ln K`.
    pub entropy_factor: f64,
    /// Used only when `temperature_scaling` is on.
    pub temperature: f64,
    pub class_rebalance: bool,
    pub sample_selection: bool,
    pub temperature_scaling: bool,
    /// Run batch-statistics backbones as batch renormalization.
    pub batch_renorm: bool,
    /// Virtual batch size for single-sample weighting; 1 disables it.
    pub buffer_size: usize,
    pub z_momentum: f64,
    pub weight_floor: f64,
    /// Track class frequencies with soft probabilities instead of one-hot
    /// pseudo-labels.
    pub soft_frequency: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            entropy_factor: 0.4,
            temperature: DEFAULT_TEMPERATURE,
            class_rebalance: false,
            sample_selection: false,
            temperature_scaling: false,
            batch_renorm: false,
            buffer_size: 1,
            z_momentum: 0.95,
            weight_floor: 1e-6,
            soft_frequency: true,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return invalid(format!("learning rate {} must be non-negative", self.lr));
        }
        if !(0.0..=1.0).contains(&self.entropy_factor) {
            return invalid(format!("entropy factor {} outside [0, 1]", self.entropy_factor));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return invalid(format!("temperature {} must be positive", self.temperature));
        }
        if self.buffer_size == 0 {
            return invalid("buffer size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.z_momentum) {
            return invalid(format!("z momentum {} outside [0, 1]", self.z_momentum));
        }
        if !(self.weight_floor > 0.0) {
            return invalid("weight floor must be positive");
        }
        Ok(())
    }

    /// The temperature actually applied to the logits.
    pub fn effective_temperature(&self) -> f64 {
        if self.temperature_scaling {
            self.temperature
        } else {
            1.0
        }
    }
}

/// Entropy factor at the best point of the selection sweep for each
/// backbone family and batch size (16, 8, 4, 2, 1). Other batch sizes use
/// the closest listed size at or below them; larger ones use 16.
pub fn default_entropy_factor(norm: NormKind, batch_size: usize) -> f64 {
    const SIZES: [usize; 5] = [16, 8, 4, 2, 1];
    let table: [f64; 5] = match norm {
        NormKind::Bn | NormKind::Bren => [0.4, 0.3, 0.6, 0.7, 1.0],
        NormKind::Gn => [0.2, 0.2, 0.2, 0.2, 0.3],
        NormKind::Ln => [0.3, 0.3, 0.3, 0.3, 0.4],
    };
    let idx = SIZES.iter().position(|&s| batch_size >= s).unwrap_or(4);
    table[idx]
}

/// Selection threshold `E0 = F ln K`.
pub fn entropy_threshold(factor: f64, num_classes: usize) -> Result<f64> {
    if num_classes < 2 {
        return invalid("entropy threshold needs at least two classes");
    }
    if !(0.0..=1.0).contains(&factor) {
        return invalid(format!("entropy factor {factor} outside [0, 1]"));
    }
    Ok(factor * (num_classes as f64).ln())
}

/// `entropy < threshold`, strictly.
pub fn select_samples(entropies: &[f64], threshold: f64) -> Vec<bool> {
    entropies.iter().map(|&h| h < threshold).collect()
}

/// Momentum estimate of the class distribution of the stream, plus the
/// recent raw weights used when adapting one sample at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFrequencyState {
    z: Vec<f64>,
    lambda: f64,
    buffer: VecDeque<f64>,
    capacity: usize,
}

impl ClassFrequencyState {
    /// Uniform `z`; the buffer keeps the last `buffer_size - 1` raw weights.
    pub fn new(num_classes: usize, lambda: f64, buffer_size: usize) -> Result<Self> {
        if num_classes == 0 {
            return invalid("need at least one class");
        }
        if !(0.0..=1.0).contains(&lambda) {
            return invalid(format!("momentum {lambda} outside [0, 1]"));
        }
        if buffer_size == 0 {
            return invalid("buffer size must be at least 1");
        }
        Ok(Self {
            z: vec![1.0 / num_classes as f64; num_classes],
            lambda,
            buffer: VecDeque::with_capacity(buffer_size - 1),
            capacity: buffer_size - 1,
        })
    }

    pub fn with_z(mut self, z: Vec<f64>) -> Result<Self> {
        let s: f64 = z.iter().sum();
        if z.len() != self.z.len() || z.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > 1e-9 {
            return invalid("z must be a probability vector of length K");
        }
        self.z = z;
        Ok(self)
    }

    pub fn with_buffer(mut self, raw: &[f64]) -> Result<Self> {
        if raw.len() > self.capacity {
            return invalid("more buffered weights than capacity");
        }
        self.buffer = raw.iter().copied().collect();
        Ok(self)
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn buffer(&self) -> impl Iterator<Item = f64> + '_ {
        self.buffer.iter().copied()
    }

    /// Virtual batch size `N`.
    pub fn buffer_size(&self) -> usize {
        self.capacity + 1
    }
}

/// `z ← λ z + (1 − λ) · mean_i(target_i)`, where the target is either the
/// probability row or its one-hot argmax. `z` is renormalized afterwards.
pub fn update_class_frequency(
    state: &mut ClassFrequencyState,
    probs: &ProbMatrix,
    soft: bool,
) -> Result<()> {
    let k = state.z.len();
    if probs.num_classes() != k {
        return invalid(format!(
            "probabilities have {} classes, frequency vector has {k}",
            probs.num_classes()
        ));
    }
    let b = probs.rows() as f64;
    let mut mean = vec![0.0; k];
    for i in 0..probs.rows() {
        let row = probs.row(i);
        if soft {
            mean.iter_mut().zip(row).for_each(|(m, p)| *m += p / b);
        } else {
            mean[argmax(row)] += 1.0 / b;
        }
    }
    let lambda = state.lambda;
    for (z, m) in state.z.iter_mut().zip(mean) {
        *z = lambda * *z + (1.0 - lambda) * m;
    }
    let s: f64 = state.z.iter().sum();
    state.z.iter_mut().for_each(|z| *z /= s);
    Ok(())
}

/// Raw DOT weights `1 / (z[ŷ_i] + ε)` with `ŷ_i` the pseudo-label of row i.
pub fn dot_weights(probs: &ProbMatrix, z: &[f64], floor: f64) -> Vec<f64> {
    (0..probs.rows())
        .map(|i| 1.0 / (z[argmax(probs.row(i))] + floor))
        .collect()
}

/// Rescales positive weights so that they average to one.
pub fn normalize_weights(raw: &[f64]) -> Vec<f64> {
    let b = raw.len() as f64;
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|r| r * b / sum).collect()
}

/// Weight of a lone sample as if it were the newest member of a batch made
/// of itself and the up to `N − 1` previous raw weights. The raw weight is
/// then pushed into the buffer, evicting the oldest once full.
pub fn buffered_single_weight(raw: f64, state: &mut ClassFrequencyState) -> Result<f64> {
    if state.capacity == 0 {
        return Err(Error::InvalidState(
            "single-sample buffering needs a buffer size of at least 2".into(),
        ));
    }
    let count = state.buffer.len() + 1;
    let total = raw + state.buffer.iter().sum::<f64>();
    let w = raw * count as f64 / total;
    if state.buffer.len() == state.capacity {
        state.buffer.pop_front();
    }
    state.buffer.push_back(raw);
    Ok(w)
}

/// Everything observed in one adaptation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Pseudo-labels from the pre-update forward pass.
    pub predictions: Vec<usize>,
    pub entropies: Vec<f64>,
    pub selected: Vec<bool>,
    pub weights: Vec<f64>,
    pub loss: f64,
    pub num_selected: usize,
    /// Whether the parameters were updated.
    pub updated: bool,
}

/// One predict → select → weight → backprop → update step.
///
/// The model's normalization kind decides the forward behaviour; use
/// [`prepare_model`] to apply the `batch_renorm` switch first.
pub fn adapt_step(
    model: &mut ModelState,
    x: &Batch,
    cfg: &AdaptConfig,
    freq: &mut ClassFrequencyState,
) -> Result<StepReport> {
    let k = model.num_classes();
    let tau = cfg.effective_temperature();
    let (logits, cache) = model.forward(x, ForwardMode::Adapt)?;
    let probs = softmax_with_temperature(&logits, tau)?;
    let predictions = logits.predictions();
    let entropies = shannon_entropy(&probs)?;
    let selected = if cfg.sample_selection {
        select_samples(&entropies, entropy_threshold(cfg.entropy_factor, k)?)
    } else {
        vec![true; entropies.len()]
    };
    let weights = if cfg.class_rebalance {
        let raw = dot_weights(&probs, freq.z(), cfg.weight_floor);
        if raw.len() == 1 && freq.capacity > 0 {
            vec![buffered_single_weight(raw[0], freq)?]
        } else {
            normalize_weights(&raw)
        }
    } else {
        vec![1.0; entropies.len()]
    };
    update_class_frequency(freq, &probs, cfg.soft_frequency)?;
    let num_selected = selected.iter().filter(|&&s| s).count();
    let loss = weighted_entropy_loss(&probs, &weights, &selected)?;
    let updated = num_selected > 0;
    if updated {
        let grads = model.backward_entropy(cache, &probs, tau, &weights, &selected)?;
        model.sgd_step(&grads, cfg.lr);
    }
    Ok(StepReport {
        predictions,
        entropies,
        selected,
        weights,
        loss,
        num_selected,
        updated,
    })
}

/// Applies the `batch_renorm` switch: a BN backbone becomes BReN.
pub fn prepare_model(model: ModelState, cfg: &AdaptConfig) -> Result<ModelState> {
    if cfg.batch_renorm && model.norm_kind() == NormKind::Bn {
        model.with_norm_kind(NormKind::Bren)
    } else {
        Ok(model)
    }
}

/// Outcome of adapting over a whole stream.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub accuracy: OnlineAccuracy,
    pub trace: Vec<TraceRecord>,
    pub selected: u64,
    pub seen: u64,
    pub model: ModelState,
}

impl RunOutcome {
    pub fn selected_fraction(&self) -> f64 {
        if self.seen == 0 {
            0.0
        } else {
            self.selected as f64 / self.seen as f64
        }
    }
}

/// Adapts a copy of `model` over `stream`, counting each batch's
/// predictions before the update that batch triggers.
pub fn run_stream(
    model: &ModelState,
    stream: &TestStream,
    cfg: &AdaptConfig,
    run: u64,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut model = prepare_model(model.clone(), cfg)?;
    let mut freq = ClassFrequencyState::new(model.num_classes(), cfg.z_momentum, cfg.buffer_size)?;
    let mut acc = OnlineAccuracy::new();
    let mut trace = Vec::with_capacity(stream.batches.len());
    let mut selected = 0u64;
    for (step, batch) in stream.batches.iter().enumerate() {
        let report = adapt_step(&mut model, &batch.x, cfg, &mut freq)?;
        acc.record(&report.predictions, &batch.labels)?;
        selected += report.num_selected as u64;
        trace.push(TraceRecord {
            run,
            step,
            seen: acc.total,
            correct: acc.correct,
            acc: acc.accuracy(),
            selected: report.num_selected,
            loss: report.loss,
        });
    }
    Ok(RunOutcome {
        seen: acc.total,
        accuracy: acc,
        trace,
        selected,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use proptest::prelude::*;

    fn probs(rows: &[Vec<f64>]) -> ProbMatrix {
        ProbMatrix::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn threshold_values() {
        assert!((entropy_threshold(1.0, 1000).unwrap() - 1000f64.ln()).abs() < 1e-12);
        assert_eq!(entropy_threshold(0.0, 17).unwrap(), 0.0);
        // 0.4 ln 1000 = 2.763102111592855 (independent high-precision value)
        let e0 = entropy_threshold(0.4, 1000).unwrap();
        assert!((e0 - 2.7631).abs() < 1e-4);
        assert!((e0 - 2.763_102_111_592_855).abs() < 1e-12);
        assert!(entropy_threshold(0.5, 1).is_err());
    }

    #[test]
    fn selection_examples() {
        let e0 = entropy_threshold(0.4, 1000).unwrap();
        assert_eq!(select_samples(&[0.5, 3.0, 2.76], e0), vec![true, false, true]);
        let ln_k = 10f64.ln();
        assert_eq!(select_samples(&[ln_k], ln_k), vec![false]);
        assert_eq!(select_samples(&[0.0, 1.0], 0.0), vec![false, false]);
    }

    #[test]
    fn frequency_update_cases() {
        let p = probs(&[vec![0.2, 0.3, 0.5]]);
        let mut s = ClassFrequencyState::new(3, 1.0, 1).unwrap();
        let before = s.z().to_vec();
        update_class_frequency(&mut s, &p, true).unwrap();
        assert_eq!(s.z(), &before[..]);

        let mut s = ClassFrequencyState::new(5, 0.0, 1).unwrap();
        let one_hot = probs(&[vec![0.0, 0.0, 0.0, 1.0, 0.0]]);
        update_class_frequency(&mut s, &one_hot, true).unwrap();
        assert_eq!(s.z(), &[0.0, 0.0, 0.0, 1.0, 0.0]);

        let mut s = ClassFrequencyState::new(4, 0.9, 1).unwrap();
        let uniform = probs(&[vec![0.25; 4], vec![0.25; 4]]);
        update_class_frequency(&mut s, &uniform, true).unwrap();
        assert!(s.z().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        assert!(update_class_frequency(&mut s, &p, true).is_err());
    }

    #[test]
    fn hard_frequency_uses_argmax() {
        let mut s = ClassFrequencyState::new(3, 0.0, 1).unwrap();
        update_class_frequency(&mut s, &probs(&[vec![0.2, 0.45, 0.35], vec![0.6, 0.2, 0.2]]), false)
            .unwrap();
        assert_eq!(s.z(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn dot_weight_examples() {
        let p = probs(&vec![vec![0.1; 10]; 3]);
        let w = dot_weights(&p, &[0.1; 10], 0.0);
        assert!(w.iter().all(|&v| (v - 10.0).abs() < 1e-12));

        let p = probs(&[vec![0.7, 0.3], vec![0.4, 0.6]]);
        let w = dot_weights(&p, &[0.9, 0.1], 0.0);
        assert!((w[0] - 1.0 / 0.9).abs() < 1e-12);
        assert!((w[1] - 10.0).abs() < 1e-12);

        let p = probs(&[vec![0.0, 1.0]]);
        let w = dot_weights(&p, &[1.0, 0.0], 1e-8);
        assert!((w[0] - 1e8).abs() < 1e-3 && w[0].is_finite());
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_weights(&[3.0, 3.0, 3.0]), vec![1.0; 3]);
        assert_eq!(normalize_weights(&[42.0]), vec![1.0]);
        // 2 / (1/0.9 + 10) = 0.18 → [0.2, 1.8]
        let w = normalize_weights(&[1.0 / 0.9, 10.0]);
        assert!((w[0] - 0.2).abs() < 1e-9 && (w[1] - 1.8).abs() < 1e-9);
    }

    #[test]
    fn buffered_weight_examples() {
        let mut s = ClassFrequencyState::new(2, 0.9, 2).unwrap().with_buffer(&[1.0]).unwrap();
        assert_eq!(buffered_single_weight(1.0, &mut s).unwrap(), 1.0);

        let mut s = ClassFrequencyState::new(2, 0.9, 2)
            .unwrap()
            .with_buffer(&[1.0 / 0.9])
            .unwrap();
        let w = buffered_single_weight(10.0, &mut s).unwrap();
        assert!((w - 1.8).abs() < 1e-9);
        assert_eq!(s.buffer().collect::<Vec<_>>(), vec![10.0]);

        let mut off = ClassFrequencyState::new(2, 0.9, 1).unwrap();
        assert!(matches!(
            buffered_single_weight(1.0, &mut off),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn buffer_fills_then_evicts() {
        let mut s = ClassFrequencyState::new(2, 0.9, 3).unwrap();
        // Empty buffer: the sample is its own batch.
        assert_eq!(buffered_single_weight(5.0, &mut s).unwrap(), 1.0);
        // One stored: factor 2 over two values.
        assert_eq!(buffered_single_weight(15.0, &mut s).unwrap(), 15.0 * 2.0 / 20.0);
        assert_eq!(buffered_single_weight(10.0, &mut s).unwrap(), 10.0 * 3.0 / 30.0);
        assert_eq!(s.buffer().collect::<Vec<_>>(), vec![15.0, 10.0]);
        assert_eq!(buffered_single_weight(25.0, &mut s).unwrap(), 25.0 * 3.0 / 50.0);
        assert_eq!(s.buffer().collect::<Vec<_>>(), vec![10.0, 25.0]);
    }

    #[test]
    fn default_factor_table() {
        assert_eq!(default_entropy_factor(NormKind::Gn, 16), 0.2);
        assert_eq!(default_entropy_factor(NormKind::Gn, 1), 0.3);
        assert_eq!(default_entropy_factor(NormKind::Bn, 2), 0.7);
        assert_eq!(default_entropy_factor(NormKind::Bren, 1), 1.0);
        assert_eq!(default_entropy_factor(NormKind::Ln, 64), 0.3);
        assert_eq!(default_entropy_factor(NormKind::Ln, 3), 0.3);
    }

    #[test]
    fn config_validation() {
        assert!(AdaptConfig::default().validate().is_ok());
        for bad in [
            AdaptConfig { entropy_factor: 1.5, ..Default::default() },
            AdaptConfig { temperature: 0.0, ..Default::default() },
            AdaptConfig { buffer_size: 0, ..Default::default() },
            AdaptConfig { z_momentum: -0.1, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    proptest! {
        #[test]
        fn selection_monotone_in_factor(
            h in proptest::collection::vec(0.0f64..10f64.ln(), 1..32),
            f1 in 0.0f64..=1.0,
            f2 in 0.0f64..=1.0,
        ) {
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            let a = select_samples(&h, entropy_threshold(lo, 10).unwrap());
            let b = select_samples(&h, entropy_threshold(hi, 10).unwrap());
            prop_assert!(a.iter().zip(&b).all(|(x, y)| !x || *y));
        }

        #[test]
        fn normalized_weights_average_to_one(raw in proptest::collection::vec(1e-3f64..1e3, 2..64)) {
            let w = normalize_weights(&raw);
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-12);
        }

        #[test]
        fn z_stays_a_distribution(
            rows in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 4), 1..6),
            lambda in 0.0f64..=1.0,
            steps in 1usize..40,
        ) {
            let p: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| { let s: f64 = r.iter().sum(); r.iter().map(|v| v / s).collect() })
                .collect();
            let p = probs(&p);
            let mut s = ClassFrequencyState::new(4, lambda, 1).unwrap();
            for _ in 0..steps {
                update_class_frequency(&mut s, &p, true).unwrap();
            }
            let sum: f64 = s.z().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(s.z().iter().all(|&v| v >= 0.0));
        }
    }
}
