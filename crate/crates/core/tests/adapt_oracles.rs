mod common;

use common::*;
use tta_forge::adapt::{adapt_step, run_stream, AdaptConfig, ClassFrequencyState};
use tta_forge::model::{Layer, ModelState, NormKind};
use tta_forge::numerics::Matrix;
use tta_forge::stream::{generate_stream, synth_dataset, StreamSpec};

fn tent() -> AdaptConfig {
    AdaptConfig {
        lr: 0.05,
        ..AdaptConfig::default()
    }
}

fn run_steps(model: &mut ModelState, cfg: &AdaptConfig, batches: &[Matrix]) -> Vec<Vec<f64>> {
    let mut freq = ClassFrequencyState::new(K, cfg.z_momentum, cfg.buffer_size).unwrap();
    batches
        .iter()
        .map(|x| {
            adapt_step(model, x, cfg, &mut freq).unwrap();
            model.adaptable_vector()
        })
        .collect()
}

fn max_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn all_off_step_is_the_reference_tent_step() {
    for kind in NormKind::ALL {
        let batches: Vec<Matrix> = (0..100).map(|s| random_batch(4, D, s)).collect();
        let mut lib = small_model(kind, 7);
        let got = run_steps(&mut lib, &tent(), &batches);
        let mut reference = small_model(kind, 7);
        let want: Vec<Vec<f64>> = batches
            .iter()
            .map(|x| {
                reference_tent_step(&mut reference, x, 0.05);
                reference.adaptable_vector()
            })
            .collect();
        let gap = max_gap(&got, &want);
        assert!(gap <= 1e-12, "{kind}: {gap:e}");
    }
}

#[test]
fn single_sample_dot_without_buffer_is_tent() {
    let dot = AdaptConfig {
        class_rebalance: true,
        buffer_size: 1,
        ..tent()
    };
    for kind in [NormKind::Gn, NormKind::Ln, NormKind::Bn] {
        let batches: Vec<Matrix> = (0..100).map(|s| random_batch(1, D, s)).collect();
        let a = run_steps(&mut small_model(kind, 3), &tent(), &batches);
        let b = run_steps(&mut small_model(kind, 3), &dot, &batches);
        assert!(max_gap(&a, &b) <= 1e-12, "{kind}");
    }
}

#[test]
fn buffered_single_sample_dot_differs_from_tent() {
    let dot = AdaptConfig {
        class_rebalance: true,
        buffer_size: 2,
        ..tent()
    };
    let batches: Vec<Matrix> = (0..50).map(|s| random_batch(1, D, s)).collect();
    let a = run_steps(&mut small_model(NormKind::Gn, 3), &tent(), &batches);
    let b = run_steps(&mut small_model(NormKind::Gn, 3), &dot, &batches);
    assert!(max_gap(&a, &b) > 1e-6);
}

#[test]
fn zero_factor_leaves_model_bit_identical() {
    let cfg = AdaptConfig {
        sample_selection: true,
        entropy_factor: 0.0,
        temperature_scaling: true,
        class_rebalance: true,
        ..tent()
    };
    for kind in [NormKind::Bn, NormKind::Gn, NormKind::Ln] {
        let before = small_model(kind, 11);
        let mut m = before.clone();
        let batches: Vec<Matrix> = (0..50).map(|s| random_batch(4, D, s)).collect();
        run_steps(&mut m, &cfg, &batches);
        assert_eq!(m, before, "{kind}");
    }
}

/// Only γ and β move; linear layers never do, and running statistics move
/// only for BReN.
#[test]
fn adaptation_touches_only_normalization_affine() {
    let data = synth_dataset(K, D, 40, 1.0, 0).unwrap();
    for kind in NormKind::ALL {
        let spec = StreamSpec {
            num_classes: K,
            imbalance: 10.0,
            samples_per_step: 20,
            batch_size: 4,
            seed: 1,
            steps: None,
        };
        let stream = generate_stream(&data, &spec).unwrap();
        let before = small_model(kind, 5);
        let after = run_stream(&before, &stream, &tent(), 0).unwrap().model;
        assert_ne!(before.adaptable_vector(), after.adaptable_vector());
        for (a, b) in before.layers.iter().zip(&after.layers) {
            match (a, b) {
                (Layer::Linear(x), Layer::Linear(y)) => assert_eq!(x, y),
                (Layer::Norm(x), Layer::Norm(y)) => {
                    let stats_same =
                        x.running_mean == y.running_mean && x.running_var == y.running_var;
                    assert_eq!(stats_same, kind != NormKind::Bren, "{kind}");
                }
                (Layer::Relu, Layer::Relu) => {}
                _ => panic!("layer structure changed"),
            }
        }
    }
}

#[test]
fn predictions_are_recorded_before_the_update() {
    let cfg = AdaptConfig { lr: 5.0, ..tent() };
    let mut model = small_model(NormKind::Ln, 2);
    let x = random_batch(4, D, 9);
    let before = model.predict(&x).unwrap();
    let mut freq = ClassFrequencyState::new(K, 0.95, 1).unwrap();
    let report = adapt_step(&mut model, &x, &cfg, &mut freq).unwrap();
    assert_eq!(report.predictions, before);
}
