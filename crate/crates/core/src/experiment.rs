//! Experiment driver: data preparation, source pretraining, method presets
//! and sweeps over backbone × method × batch size × imbalance × seed.
//!
//! A results directory looks like
//!
//! ```text
//! out/
//!   checkpoints/{norm}.json
//!   traces/{cell}_s{seed}.jsonl
//!   summary.csv
//! ```

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapt::{default_entropy_factor, run_stream, AdaptConfig, RunOutcome};
use crate::error::{invalid, Error, Result};
use crate::eval::{aggregate, read_trace, write_trace, TraceRecord};
use crate::model::{
    accuracy, load_checkpoint, pretrain, save_checkpoint, ArchSpec, ModelState, NormKind,
    PretrainConfig,
};
use crate::par::{self, Execution};
use crate::stream::{
    apply_corruption, effective_imbalance, generate_stream, read_csv, synth_dataset,
    CorruptionKind, CorruptionSpec, LabeledDataset, StreamSpec, IMBALANCE_INF,
};

/// Named trick combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Preset {
    Tent,
    TentBr,
    Dot,
    Select,
    Temp,
    Bot,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Tent,
        Preset::TentBr,
        Preset::Dot,
        Preset::Select,
        Preset::Temp,
        Preset::Bot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Tent => "tent",
            Preset::TentBr => "tent+br",
            Preset::Dot => "dot",
            Preset::Select => "select",
            Preset::Temp => "temp",
            Preset::Bot => "bot",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .map_or_else(|| invalid(format!("unknown preset `{s}`")), Ok)
    }
}

impl Serialize for Preset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Preset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Imbalance ratio; written as a number or `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Imbalance(pub f64);

impl Imbalance {
    pub const INF: Imbalance = Imbalance(IMBALANCE_INF);

    pub fn ratio(self) -> f64 {
        effective_imbalance(self.0)
    }
}

impl fmt::Display for Imbalance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ratio() >= IMBALANCE_INF {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl FromStr for Imbalance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("inf") {
            return Ok(Imbalance::INF);
        }
        match s.parse::<f64>() {
            Ok(v) if v >= 1.0 => Ok(Imbalance(effective_imbalance(v))),
            _ => invalid(format!("imbalance `{s}` must be a number >= 1 or `inf`")),
        }
    }
}

impl Serialize for Imbalance {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.ratio() >= IMBALANCE_INF {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Imbalance {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v >= 1.0 => Ok(Imbalance(effective_imbalance(v))),
            Raw::Num(v) => Err(serde::de::Error::custom(format!("imbalance {v} < 1"))),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSpec {
    /// Gaussian clusters; the source and target sets are the even and odd
    /// halves of one draw of `2 · n_per_class` points per class.
    Synthetic {
        classes: usize,
        dim: usize,
        n_per_class: usize,
        spread: f64,
        seed: u64,
    },
    Csv { source: PathBuf, target: PathBuf },
}

/// Step size used by the default grid. At the bare [`AdaptConfig`] default
/// of 0.01 the GN and LN backbones barely move on the synthetic task, so
/// method differences drown in seed noise.
pub const DESK_LR: f64 = 0.02;

/// Per-field overrides applied on top of a preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptOverrides {
    pub lr: Option<f64>,
    pub entropy_factor: Option<f64>,
    pub temperature: Option<f64>,
    pub buffer_size: Option<usize>,
    pub z_momentum: Option<f64>,
    pub weight_floor: Option<f64>,
    pub soft_frequency: Option<bool>,
    pub class_rebalance: Option<bool>,
    pub sample_selection: Option<bool>,
    pub temperature_scaling: Option<bool>,
    pub batch_renorm: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub corruption: CorruptionSpec,
    pub corruption_seed: u64,
    pub samples_per_step: usize,
    pub steps: Option<usize>,
    pub hidden: Vec<usize>,
    pub groups: usize,
    pub pretrain: PretrainConfig,
    pub norms: Vec<NormKind>,
    pub presets: Vec<Preset>,
    pub batch_sizes: Vec<usize>,
    pub imbalances: Vec<Imbalance>,
    pub seeds: Vec<u64>,
    pub adapt: AdaptOverrides,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    /// The desk-scale grid: K = 10, D = 16, overlapping clusters under
    /// severity-5 noise, batch sizes 16..1 and imbalance ratios 1..∞.
    fn default() -> Self {
        Self {
            data: DataSpec::Synthetic {
                classes: 10,
                dim: 16,
                n_per_class: 200,
                spread: 2.0,
                seed: 0,
            },
            corruption: CorruptionSpec {
                kind: CorruptionKind::GaussianNoise,
                severity: 5,
            },
            corruption_seed: 0,
            samples_per_step: 100,
            steps: None,
            hidden: vec![64, 64],
            groups: 8,
            pretrain: PretrainConfig::default(),
            norms: vec![NormKind::Bn, NormKind::Gn, NormKind::Ln],
            presets: vec![Preset::Tent, Preset::Bot],
            batch_sizes: vec![16, 8, 4, 2, 1],
            imbalances: [1.0, 10.0, 100.0, 1000.0, IMBALANCE_INF]
                .map(Imbalance)
                .to_vec(),
            seeds: vec![1, 2, 3],
            adapt: AdaptOverrides {
                lr: Some(DESK_LR),
                ..AdaptOverrides::default()
            },
            out_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, empty) in [
            ("norms", self.norms.is_empty()),
            ("presets", self.presets.is_empty()),
            ("batch_sizes", self.batch_sizes.is_empty()),
            ("imbalances", self.imbalances.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return invalid(format!("`{name}` must not be empty"));
            }
        }
        if self.batch_sizes.contains(&0) || self.samples_per_step == 0 {
            return invalid("batch sizes and samples_per_step must be positive");
        }
        Ok(())
    }

    pub fn checkpoint_path(&self, norm: NormKind) -> PathBuf {
        self.out_dir.join("checkpoints").join(format!("{norm}.json"))
    }

    pub fn arch(&self, input_dim: usize, num_classes: usize, norm: NormKind) -> ArchSpec {
        ArchSpec {
            input_dim,
            hidden: self.hidden.clone(),
            num_classes,
            norm,
            groups: self.groups,
        }
    }

    /// Expands a preset into concrete adaptation settings for a backbone
    /// and batch size, then applies the overrides.
    pub fn adapt_config(&self, preset: Preset, norm: NormKind, batch_size: usize) -> AdaptConfig {
        let mut c = AdaptConfig {
            entropy_factor: default_entropy_factor(norm, batch_size),
            ..AdaptConfig::default()
        };
        match preset {
            Preset::Tent => {}
            Preset::TentBr => c.batch_renorm = true,
            Preset::Dot => {
                c.class_rebalance = true;
                c.buffer_size = 2;
            }
            Preset::Select => c.sample_selection = true,
            Preset::Temp => c.temperature_scaling = true,
            Preset::Bot => {
                c.class_rebalance = true;
                c.sample_selection = true;
                c.temperature_scaling = true;
                c.batch_renorm = norm.uses_batch_stats();
                c.buffer_size = 2;
            }
        }
        let o = &self.adapt;
        macro_rules! apply {
            ($($f:ident),*) => { $( if let Some(v) = o.$f { c.$f = v; } )* };
        }
        apply!(
            lr,
            entropy_factor,
            temperature,
            buffer_size,
            z_momentum,
            weight_floor,
            soft_frequency,
            class_rebalance,
            sample_selection,
            temperature_scaling,
            batch_renorm
        );
        c
    }

    /// Every grid cell, in norm → preset → batch size → imbalance order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &norm in &self.norms {
            for &preset in &self.presets {
                for &batch_size in &self.batch_sizes {
                    for &imbalance in &self.imbalances {
                        cells.push(Cell {
                            norm,
                            preset,
                            batch_size,
                            imbalance,
                            adapt: self.adapt_config(preset, norm, batch_size),
                        });
                    }
                }
            }
        }
        cells
    }
}

/// One point of the sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub norm: NormKind,
    pub preset: Preset,
    pub batch_size: usize,
    pub imbalance: Imbalance,
    pub adapt: AdaptConfig,
}

impl Cell {
    pub fn id(&self) -> String {
        format!(
            "{}_{}_b{}_r{}",
            self.norm,
            self.preset.name().replace('+', "-"),
            self.batch_size,
            self.imbalance
        )
    }
}

/// Source and (corrupted) target data.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub source: LabeledDataset,
    pub target: LabeledDataset,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (source, target) = match &cfg.data {
        DataSpec::Synthetic {
            classes,
            dim,
            n_per_class,
            spread,
            seed,
        } => synth_dataset(*classes, *dim, 2 * n_per_class, *spread, *seed)?.split_alternate(),
        DataSpec::Csv { source, target } => (read_csv(source)?, read_csv(target)?),
    };
    if source.dim() != target.dim() || source.num_classes != target.num_classes {
        return invalid("source and target disagree on dimension or class count");
    }
    let target = apply_corruption(&target, &cfg.corruption, cfg.corruption_seed)?;
    Ok(Prepared { source, target })
}

/// Source-trained model and its accuracies.
#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub norm: NormKind,
    pub path: PathBuf,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
}

/// Trains one model per configured backbone and writes the checkpoints.
pub fn pretrain_all(cfg: &ExperimentConfig, exec: Execution) -> Result<Vec<PretrainReport>> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let results = par::map(&cfg.norms, exec, |&norm| -> Result<(ModelState, f64, f64)> {
        let arch = cfg.arch(data.source.dim(), data.source.num_classes, norm);
        let model = pretrain(&data.source, arch, &cfg.pretrain)?;
        let src = accuracy(&model, &data.source)?;
        let tgt = accuracy(&model, &data.target)?;
        Ok((model, src, tgt))
    });
    let mut reports = Vec::new();
    for (&norm, r) in cfg.norms.iter().zip(results) {
        let (model, source_accuracy, target_accuracy) = r?;
        let path = cfg.checkpoint_path(norm);
        save_checkpoint(&model, &path)?;
        reports.push(PretrainReport {
            norm,
            path,
            source_accuracy,
            target_accuracy,
        });
    }
    Ok(reports)
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: String,
    pub norm: NormKind,
    pub preset: Preset,
    pub batch_size: usize,
    pub imbalance: Imbalance,
    pub class_rebalance: bool,
    pub sample_selection: bool,
    pub temperature_scaling: bool,
    pub batch_renorm: bool,
    pub entropy_factor: f64,
    pub temperature: f64,
    pub buffer_size: usize,
    pub lr: f64,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
    pub selected_fraction: f64,
}

/// Final figures of one (cell, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub accuracy: f64,
    pub selected_fraction: f64,
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub runs: Vec<RunResult>,
    pub summary: SummaryRow,
}

/// Runs every (cell, seed) pair against already-prepared data and models,
/// without touching the filesystem.
pub fn run_cells(
    cfg: &ExperimentConfig,
    data: &Prepared,
    models: &[(NormKind, ModelState)],
    exec: Execution,
) -> Result<Vec<CellResult>> {
    let cells = cfg.cells();
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let outcomes = par::map(&jobs, exec, |&(c, seed)| -> Result<RunResult> {
        let cell = &cells[c];
        let model = models
            .iter()
            .find(|(k, _)| *k == cell.norm)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::InvalidState(format!("no model for backbone {}", cell.norm)))?;
        let spec = StreamSpec {
            num_classes: data.target.num_classes,
            imbalance: cell.imbalance.ratio(),
            samples_per_step: cfg.samples_per_step,
            batch_size: cell.batch_size,
            seed,
            steps: cfg.steps,
        };
        let stream = generate_stream(&data.target, &spec)?;
        let RunOutcome {
            accuracy,
            trace,
            selected,
            seen,
            ..
        } = run_stream(model, &stream, &cell.adapt, seed)?;
        Ok(RunResult {
            seed,
            accuracy: accuracy.accuracy(),
            selected_fraction: selected as f64 / seen.max(1) as f64,
            trace,
        })
    });
    let mut outcomes = outcomes.into_iter();
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let runs: Vec<RunResult> = outcomes
            .by_ref()
            .take(cfg.seeds.len())
            .collect::<Result<_>>()?;
        let summary = summarize(&cell, &runs)?;
        results.push(CellResult { cell, runs, summary });
    }
    Ok(results)
}

fn summarize(cell: &Cell, runs: &[RunResult]) -> Result<SummaryRow> {
    let finals: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let agg = aggregate(&finals)?;
    let selected = runs.iter().map(|r| r.selected_fraction).sum::<f64>() / runs.len() as f64;
    Ok(SummaryRow {
        cell: cell.id(),
        norm: cell.norm,
        preset: cell.preset,
        batch_size: cell.batch_size,
        imbalance: cell.imbalance,
        class_rebalance: cell.adapt.class_rebalance,
        sample_selection: cell.adapt.sample_selection,
        temperature_scaling: cell.adapt.temperature_scaling,
        batch_renorm: cell.adapt.batch_renorm,
        entropy_factor: cell.adapt.entropy_factor,
        temperature: cell.adapt.effective_temperature(),
        buffer_size: cell.adapt.buffer_size,
        lr: cell.adapt.lr,
        runs: runs.len(),
        mean: agg.mean,
        std: agg.std,
        selected_fraction: selected,
    })
}

/// Loads the backbones a config needs from its checkpoint directory.
pub fn load_models(cfg: &ExperimentConfig) -> Result<Vec<(NormKind, ModelState)>> {
    cfg.norms
        .iter()
        .map(|&n| Ok((n, load_checkpoint(&cfg.checkpoint_path(n))?)))
        .collect()
}

/// Runs the configured grid and writes traces and `summary.csv` under
/// `out_dir`. Pretrained checkpoints must already exist.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    exec: Execution,
    workers: Option<usize>,
) -> Result<Vec<SummaryRow>> {
    cfg.validate()?;
    let models = load_models(cfg)?;
    let data = prepare_data(cfg)?;
    let results = par::with_workers(workers, || run_cells(cfg, &data, &models, exec))??;
    write_traces(&cfg.out_dir, &results)?;
    let rows: Vec<SummaryRow> = results.into_iter().map(|r| r.summary).collect();
    write_summary(&cfg.out_dir.join("summary.csv"), &rows)?;
    Ok(rows)
}

/// Writes `out_dir/traces/{cell}_s{seed}.jsonl` for every run.
pub fn write_traces(out_dir: &Path, results: &[CellResult]) -> Result<()> {
    let trace_dir = out_dir.join("traces");
    fs::create_dir_all(&trace_dir)?;
    for r in results {
        for run in &r.runs {
            let path = trace_dir.join(format!("{}_s{}.jsonl", r.cell.id(), run.seed));
            let mut w = BufWriter::new(fs::File::create(path)?);
            write_trace(&mut w, &run.trace)?;
            w.flush()?;
        }
    }
    Ok(())
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        rows.push(rec.map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            line: i as u64 + 2,
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Csv {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    }
}

/// Recomputes a summary row's mean and std from its trace files and checks
/// them against the stored values.
pub fn verify_summary_row(out_dir: &Path, row: &SummaryRow, seeds: &[u64]) -> Result<bool> {
    let mut finals = Vec::with_capacity(seeds.len());
    for seed in seeds {
        let path = out_dir.join("traces").join(format!("{}_s{seed}.jsonl", row.cell));
        let trace = read_trace(BufReader::new(fs::File::open(&path)?))?;
        let last = trace
            .last()
            .ok_or_else(|| Error::InvalidState(format!("empty trace {}", path.display())))?;
        finals.push(last.correct as f64 / last.seen as f64);
    }
    let agg = aggregate(&finals)?;
    Ok(agg.mean == row.mean && agg.std == row.std && finals.len() == row.runs)
}
