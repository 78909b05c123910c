use std::fs;
use std::path::Path;

use tta_forge::experiment::{
    load_models, prepare_data, pretrain_all, read_summary, run_cells, run_experiment,
    verify_summary_row, DataSpec, ExperimentConfig, Imbalance, Preset,
};
use tta_forge::model::{NormKind, PretrainConfig};
use tta_forge::par::Execution;
use tta_forge::report::report;
use tta_forge::Error;

fn small(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        data: DataSpec::Synthetic {
            classes: 4,
            dim: 6,
            n_per_class: 30,
            spread: 1.5,
            seed: 0,
        },
        samples_per_step: 20,
        hidden: vec![16, 16],
        groups: 4,
        pretrain: PretrainConfig {
            epochs: 5,
            ..PretrainConfig::default()
        },
        norms: vec![NormKind::Bn, NormKind::Gn],
        presets: vec![Preset::Tent, Preset::Bot],
        batch_sizes: vec![4, 1],
        imbalances: vec![Imbalance(1.0), Imbalance(100.0)],
        seeds: vec![1, 2, 3],
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&small(dir.path()), Execution::Sequential, None).unwrap_err();
    assert!(matches!(err, Error::MissingCheckpoint(_)), "{err}");
}

#[test]
fn summary_rows_are_reproducible_from_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    pretrain_all(&cfg, Execution::Parallel).unwrap();
    let rows = run_experiment(&cfg, Execution::Parallel, None).unwrap();
    assert_eq!(rows.len(), 2 * 2 * 2 * 2);
    assert_eq!(read_summary(&dir.path().join("summary.csv")).unwrap(), rows);
    for row in &rows {
        assert_eq!(row.runs, 3);
        assert!(verify_summary_row(dir.path(), row, &cfg.seeds).unwrap(), "{}", row.cell);
    }
    let (rep, txt, csv) = report(dir.path()).unwrap();
    assert_eq!(rep.warnings, 0);
    assert!(txt.exists() && csv.exists());
}

#[test]
fn rerun_and_execution_mode_give_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg_a = small(a.path());
    let cfg_b = small(b.path());
    pretrain_all(&cfg_a, Execution::Parallel).unwrap();
    pretrain_all(&cfg_b, Execution::Sequential).unwrap();
    for n in &cfg_a.norms {
        assert_eq!(
            fs::read(cfg_a.checkpoint_path(*n)).unwrap(),
            fs::read(cfg_b.checkpoint_path(*n)).unwrap()
        );
    }
    run_experiment(&cfg_a, Execution::Parallel, Some(2)).unwrap();
    run_experiment(&cfg_b, Execution::Sequential, None).unwrap();
    let summary = |d: &Path| fs::read(d.join("summary.csv")).unwrap();
    assert_eq!(summary(a.path()), summary(b.path()));
    run_experiment(&cfg_a, Execution::Parallel, None).unwrap();
    assert_eq!(summary(a.path()), summary(b.path()));
}

#[test]
fn tent_equals_bot_with_every_trick_off() {
    let dir = tempfile::tempdir().unwrap();
    let mut tent = small(dir.path());
    tent.presets = vec![Preset::Tent];
    let mut bot = tent.clone();
    bot.presets = vec![Preset::Bot];
    bot.adapt.class_rebalance = Some(false);
    bot.adapt.sample_selection = Some(false);
    bot.adapt.temperature_scaling = Some(false);
    bot.adapt.batch_renorm = Some(false);

    let data = prepare_data(&tent).unwrap();
    pretrain_all(&tent, Execution::Sequential).unwrap();
    let models = load_models(&tent).unwrap();
    let a = run_cells(&tent, &data, &models, Execution::Sequential).unwrap();
    let b = run_cells(&bot, &data, &models, Execution::Sequential).unwrap();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        let (mut sx, mut sy) = (x.summary.clone(), y.summary.clone());
        // Buffer size is inert without class rebalancing.
        assert!(!sy.class_rebalance);
        (sx.cell, sx.preset, sx.buffer_size) = (String::new(), Preset::Tent, 0);
        (sy.cell, sy.preset, sy.buffer_size) = (String::new(), Preset::Tent, 0);
        assert_eq!(sx, sy);
        for (rx, ry) in x.runs.iter().zip(&y.runs) {
            assert_eq!(rx.trace, ry.trace);
        }
    }
}
