//! `tta-forge` command-line driver.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tta_forge::experiment::{
    load_models, prepare_data, pretrain_all, run_cells, run_experiment, write_traces,
    ExperimentConfig, Imbalance, Preset, SummaryRow,
};
use tta_forge::model::NormKind;
use tta_forge::par::{self, Execution};
use tta_forge::report::report;
use tta_forge::Error;

#[derive(Parser)]
#[command(name = "tta-forge", version, about = "Streaming fully test-time adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one source model per backbone and write checkpoints.
    Pretrain(Opts),
    /// Adapt over a single grid cell and print its accuracy.
    Adapt(Opts),
    /// Run the whole grid and write traces and summary.csv.
    Sweep(Opts),
    /// Render tables from a results directory's summary.csv.
    Report(ReportOpts),
}

/// Flags override values from `--config`.
#[derive(Args)]
struct Opts {
    /// JSON experiment config; built-in desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, env = "TTA_FORGE_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Imbalance ratio, or `inf`.
    #[arg(long, value_name = "RHO|inf")]
    imbalance: Option<Imbalance>,
    /// Backbone normalization: bn, bren, gn or ln.
    #[arg(long)]
    norm: Option<NormKind>,
    /// tent, tent+br, dot, select, temp or bot.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long, value_name = "F")]
    entropy_factor: Option<f64>,
    /// Softmax temperature; also switches temperature scaling on.
    #[arg(long, value_name = "T")]
    temperature: Option<f64>,
    /// Single-sample buffer size N (1 disables the buffer).
    #[arg(long, value_name = "N")]
    buffer: Option<usize>,
    /// Output directory for checkpoints, traces and summaries.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for sweep cells; 1 runs sequentially.
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
}

#[derive(Args)]
struct ReportOpts {
    /// Results directory; falls back to the config's output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Opts {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_path(p)
                .with_context(|| format!("reading config {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(b) = self.batch_size {
            cfg.batch_sizes = vec![b];
        }
        if let Some(i) = self.imbalance {
            cfg.imbalances = vec![i];
        }
        if let Some(n) = self.norm {
            cfg.norms = vec![n];
        }
        if let Some(p) = self.preset {
            cfg.presets = vec![p];
        }
        if let Some(f) = self.entropy_factor {
            cfg.adapt.entropy_factor = Some(f);
        }
        if let Some(t) = self.temperature {
            cfg.adapt.temperature = Some(t);
            cfg.adapt.temperature_scaling = Some(true);
        }
        if let Some(n) = self.buffer {
            cfg.adapt.buffer_size = Some(n);
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        for c in cfg.cells() {
            c.adapt.validate().with_context(|| format!("cell {}", c.id()))?;
        }
        Ok(cfg)
    }

    fn execution(&self) -> Execution {
        if self.workers == Some(1) {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

fn with_checkpoint_hint<T>(r: tta_forge::Result<T>) -> Result<T> {
    match r {
        Err(Error::MissingCheckpoint(p)) => bail!(
            "missing checkpoint {}; run `tta-forge pretrain` with the same config first",
            p.display()
        ),
        other => Ok(other?),
    }
}

fn print_rows(rows: &[SummaryRow]) {
    println!(
        "{:<28} {:>8} {:>7} {:>9}",
        "cell", "mean %", "std %", "selected"
    );
    for r in rows {
        println!(
            "{:<28} {:>8.2} {:>7.2} {:>8.1}%",
            r.cell,
            r.mean * 100.0,
            r.std * 100.0,
            r.selected_fraction * 100.0
        );
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain(o) => {
            let cfg = o.config()?;
            let reports = par::with_workers(o.workers, || pretrain_all(&cfg, o.execution()))??;
            for r in reports {
                println!(
                    "{}: source {:.2}%, target {:.2}% -> {}",
                    r.norm,
                    r.source_accuracy * 100.0,
                    r.target_accuracy * 100.0,
                    r.path.display()
                );
            }
        }
        Command::Adapt(o) => {
            let mut cfg = o.config()?;
            // One cell: the first entry of each axis.
            cfg.norms.truncate(1);
            cfg.presets.truncate(1);
            cfg.batch_sizes.truncate(1);
            cfg.imbalances.truncate(1);
            let models = with_checkpoint_hint(load_models(&cfg))?;
            let data = prepare_data(&cfg)?;
            let results =
                par::with_workers(o.workers, || run_cells(&cfg, &data, &models, o.execution()))??;
            write_traces(&cfg.out_dir, &results)?;
            let rows: Vec<SummaryRow> = results.into_iter().map(|r| r.summary).collect();
            print_rows(&rows);
        }
        Command::Sweep(o) => {
            let cfg = o.config()?;
            let rows = with_checkpoint_hint(run_experiment(&cfg, o.execution(), o.workers))?;
            print_rows(&rows);
            println!("wrote {}", cfg.out_dir.join("summary.csv").display());
        }
        Command::Report(o) => {
            let dir = match (o.out, o.config) {
                (Some(d), _) => d,
                (None, Some(c)) => ExperimentConfig::from_path(&c)?.out_dir,
                (None, None) => ExperimentConfig::default().out_dir,
            };
            let (rep, txt, csv) = report(&dir)?;
            print!("{}", rep.render_text());
            println!("wrote {} and {}", txt.display(), csv.display());
        }
    }
    Ok(())
}
