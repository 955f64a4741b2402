//! Command-line interface. Exit codes: 0 success, 1 some benchmark cells
//! failed, 2 usage, configuration or input errors.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::json;

use segbench_core::dataio::{generate_synthetic, ExperimentKind, SplitName, SyntheticSpec};
use segbench_core::metrics::{EmptyRule, METRICS_HEADER};
use segbench_core::report::DEFAULT_HISTOGRAM_BINS;
use segbench_core::training::TrainConfig;

use crate::commands::{self, ReportOptions};
use crate::error::{Error, Result};
use crate::log;
use crate::manifest::{load_dataset, write_dataset};
use crate::runner::{self, RunOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CELL_FAILURES: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "segbench", version, about = "Desk-scale segmentation model benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

fn parse_shape(s: &str) -> Result<(usize, usize), String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| format!("invalid size {t:?}"));
    match s.split_once(['x', 'X']) {
        Some((r, c)) => Ok((parse(r)?, parse(c)?)),
        None => parse(s).map(|n| (n, n)),
    }
}

fn parse_split(s: &str) -> Result<SplitName, String> {
    match s {
        "train" => Ok(SplitName::Train),
        "val" => Ok(SplitName::Val),
        "test" => Ok(SplitName::Test),
        _ => Err(format!("unknown split {s:?}")),
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic CT-like dataset (SEGB files plus manifest.json).
    GenerateSynthetic {
        /// Total number of slices over all splits (>= 3).
        #[arg(long)]
        n: usize,
        /// Slice size, `N` or `ROWSxCOLS`.
        #[arg(long, value_parser = parse_shape, default_value = "64")]
        shape: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Small, sparse lesions instead of larger ones.
        #[arg(long)]
        unbalanced: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every cell of a benchmark matrix.
    Benchmark {
        /// Benchmark config, or the run_manifest.json of a previous run.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Zero the timing columns so outputs are byte-reproducible.
        #[arg(long)]
        strict_repro: bool,
    },
    /// Score a checkpoint on one split and print a metrics row.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        experiment: ExperimentKind,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: SplitName,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value = "paper_literal")]
        empty_rule: EmptyRule,
    },
    /// Emit tables and figure data for a finished run.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Pixel-intensity histograms of each experiment's dataset.
        #[arg(long)]
        histograms: bool,
        #[arg(long, default_value_t = DEFAULT_HISTOGRAM_BINS)]
        bins: usize,
        /// Dice vs. parameter-count scatter and Pearson r.
        #[arg(long)]
        scatter: bool,
        /// Weight-grid PGM of this layer for every cell.
        #[arg(long)]
        weights: Option<String>,
        /// Stack test-split predictions into per-volume voxel files.
        #[arg(long)]
        volumes: bool,
    },
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenerateSynthetic { n, shape, seed, unbalanced, out } => {
            let ds = generate_synthetic(&SyntheticSpec { n_slices: n, shape, seed, balanced: !unbalanced })?;
            let path = write_dataset(&out, &ds)?;
            log::event("dataset_written", json!({"manifest": path.display().to_string(), "train": ds.train.len(), "val": ds.val.len(), "test": ds.test.len()}));
            println!("{}", path.display());
            Ok(EXIT_OK)
        }
        Command::Benchmark { config, out, jobs, strict_repro } => {
            if jobs == 0 {
                return Err(Error::Usage("--jobs must be >= 1".into()));
            }
            let seed_override = runner::seed_from_env()?;
            let summary = runner::run_benchmark(&config, &RunOptions { out, jobs, strict_repro, seed_override })?;
            Ok(if summary.failed() > 0 { EXIT_CELL_FAILURES } else { EXIT_OK })
        }
        Command::Evaluate { checkpoint, dataset, experiment, split, threshold, empty_rule } => {
            let cfg = TrainConfig { threshold, empty_rule, ..TrainConfig::default() };
            cfg.validate()?;
            let ds = load_dataset(&dataset)?;
            let record = commands::evaluate(&checkpoint, &ds, experiment, split, &cfg)?;
            println!("{METRICS_HEADER}\n{}", record.csv_row());
            Ok(EXIT_OK)
        }
        Command::Report { run, histograms, bins, scatter, weights, volumes } => {
            let files = commands::report(&run, &ReportOptions { histograms, bins, scatter, weights, volumes })?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            log::event("error", json!({"message": e.to_string()}));
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}
