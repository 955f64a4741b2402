//! Runs a benchmark matrix in parallel and writes its artifacts.
//!
//! Output layout under `--out`:
//!
//! ```text
//! metrics.csv              one row per cell, matrix order
//! keys-values.csv          Dice summary keys, two columns, no header
//! aggregates.csv           mean / std per architecture, encoder, experiment, init
//! records.json             metrics rows including failure messages
//! run_manifest.json        config, seeds, digests
//! runs/<cell-id>/best.ckpt
//! runs/<cell-id>/epoch_log.csv
//! pretrained/<encoder>.ckpt  (when warm-start encoders are pretrained)
//! ```
//!
//! Each cell runs single-threaded with its own random stream derived from the
//! seed and the cell id, so results do not depend on `--jobs`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use segbench_core::dataio::{Dataset, ExperimentKind};
use segbench_core::metrics::{aggregate, aggregate_csv, metrics_csv, GroupBy, MetricsRecord, AGGREGATE_HEADER};
use segbench_core::models::{EncoderKind, ModelConfig, WeightInit};
use segbench_core::report::{keys_values, keys_values_csv};
use segbench_core::training::{
    cell_stream, pretrain_encoder, run_experiment_cell, CellOptions, CellResult, Clock, NullClock, Snapshot,
};
use segbench_core::RngStream;

use crate::checkpoint::{self, Container};
use crate::config::{BenchmarkConfig, DatasetSource};
use crate::error::{self, Error, IoContext, Result};
use crate::log;
use crate::manifest::{dataset_digest, sha256_hex};

pub const SEED_ENV: &str = "SEGBENCH_SEED";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Seconds since the clock was created.
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    pub jobs: usize,
    /// Zero all wall-clock columns so every artifact is byte-reproducible.
    pub strict_repro: bool,
    pub seed_override: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_path: PathBuf,
    /// Base for the config's relative paths.
    pub config_dir: PathBuf,
    pub config_digest: String,
    /// The config as executed (seed override applied).
    pub config: BenchmarkConfig,
    pub seed: u64,
    pub seed_source: String,
    pub strict_repro: bool,
    pub jobs: usize,
    pub matrix: Vec<String>,
    pub dataset_digests: BTreeMap<String, String>,
    pub warmstart_digests: BTreeMap<String, String>,
    pub artifact_digests: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub struct RunSummary {
    pub records: Vec<MetricsRecord>,
    pub manifest: RunManifest,
}

impl RunSummary {
    pub fn failed(&self) -> usize {
        self.records.iter().filter(|r| !r.is_ok()).count()
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Reads either a benchmark config or a previous run's manifest (re-executing
/// its embedded config). Returns the config and its path base.
pub fn load_config(path: &Path) -> Result<(BenchmarkConfig, PathBuf, Vec<u8>)> {
    let bytes = error::read(path)?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|source| Error::Json { path: path.into(), source })?;
    if value.get("tool_version").is_some() && value.get("config").is_some() {
        let m: RunManifest = serde_json::from_value(value).map_err(|source| Error::Json { path: path.into(), source })?;
        let cfg_bytes = serde_json::to_vec(&m.config).expect("config serializes");
        return Ok((m.config, m.config_dir, cfg_bytes));
    }
    let cfg = BenchmarkConfig::parse(&bytes, path)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let dir = if dir.as_os_str().is_empty() { PathBuf::from(".") } else { dir };
    let dir = std::fs::canonicalize(&dir).at(&dir)?;
    Ok((cfg, dir, bytes))
}

pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| Error::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("cannot start {jobs} workers: {e}")))
}

/// Loads each distinct dataset source once.
fn load_datasets(cfg: &BenchmarkConfig, base: &Path) -> Result<Vec<(ExperimentKind, Dataset)>> {
    let mut cache: Vec<(&DatasetSource, Dataset)> = Vec::new();
    let mut out = Vec::new();
    for exp in cfg.experiments()? {
        let src = cfg.dataset_for(exp)?;
        let ds = match cache.iter().find(|(s, _)| *s == src) {
            Some((_, d)) => d.clone(),
            None => {
                let d = src.load(base)?;
                cache.push((src, d.clone()));
                d
            }
        };
        if !ds.supports(exp) {
            return Err(Error::Usage(format!("dataset {:?} lacks the lung masks {} needs", ds.name, exp.slug())));
        }
        log::event("dataset_loaded", json!({"experiment": exp.slug(), "name": ds.name, "train": ds.train.len(), "val": ds.val.len(), "test": ds.test.len()}));
        out.push((exp, ds));
    }
    Ok(out)
}

/// Encoder tensors for every encoder some warm-start cell uses.
fn resolve_warmstart(
    cfg: &BenchmarkConfig,
    base: &Path,
    matrix: &[ModelConfig],
    out: &Path,
    workers: &rayon::ThreadPool,
) -> Result<BTreeMap<EncoderKind, (Snapshot, String)>> {
    let mut kinds: Vec<EncoderKind> = matrix
        .iter()
        .filter(|c| matches!(c.weight_init, WeightInit::Warmstart { .. }))
        .map(|c| c.encoder.kind)
        .collect();
    kinds.sort();
    kinds.dedup();
    let mut found = BTreeMap::new();
    if kinds.is_empty() {
        return Ok(found);
    }
    if let Some(dir) = &cfg.warmstart.checkpoint_dir {
        for &k in &kinds {
            let path = base.join(dir).join(crate::config::warmstart_name(k));
            if path.exists() || cfg.warmstart.pretrain.is_none() {
                let bytes = error::read(&path)?;
                let c = checkpoint::decode(&bytes).map_err(|m| Error::format(&path, m))?;
                found.insert(k, (c.checkpoint.params, sha256_hex(&bytes)));
            }
        }
    }
    let missing: Vec<EncoderKind> = kinds.iter().copied().filter(|k| !found.contains_key(k)).collect();
    if missing.is_empty() {
        return Ok(found);
    }
    let pre = cfg.warmstart.pretrain.as_ref().expect("validated: pretrain configured");
    let ds = pre.dataset.load(base)?;
    let mut train = pre.train.clone();
    train.seed = cfg.train.seed;
    let results: Vec<Result<(EncoderKind, Snapshot, String)>> = workers.install(|| {
        missing
            .par_iter()
            .map(|&k| {
                let ck = pretrain_encoder(&ds, k, cfg.width_scale, &train)?;
                let bytes = checkpoint::encode(&Container { model_config: None, checkpoint: ck.clone() });
                let path = out.join("pretrained").join(crate::config::warmstart_name(k));
                error::write(&path, &bytes)?;
                log::event("encoder_pretrained", json!({"encoder": k.name(), "epoch": ck.epoch, "val_loss": ck.val_loss}));
                Ok((k, ck.params, sha256_hex(&bytes)))
            })
            .collect()
    });
    for r in results {
        let (k, p, d) = r?;
        found.insert(k, (p, d));
    }
    Ok(found)
}

fn write_cell(out: &Path, result: &CellResult) -> Result<()> {
    let dir = out.join("runs").join(result.config.cell_id());
    match &result.state {
        Some(state) => {
            error::write(&dir.join("epoch_log.csv"), state.epoch_log_csv())?;
            if let Some(best) = &state.best {
                checkpoint::write(
                    &dir.join("best.ckpt"),
                    &Container { model_config: Some(result.config.clone()), checkpoint: best.clone() },
                )?;
            }
            Ok(())
        }
        None => error::write(&dir.join("error.txt"), format!("{}\n", result.record.error.as_deref().unwrap_or(""))),
    }
}

pub fn aggregates_text(records: &[MetricsRecord]) -> String {
    let mut text = format!("{AGGREGATE_HEADER}\n");
    for g in GroupBy::ALL {
        if let Ok(rows) = aggregate(records, g) {
            text.push_str(&aggregate_csv(g, &rows));
        }
    }
    text
}

/// Writes the table artifacts for `records`; returns their digests.
pub fn write_tables(out: &Path, records: &[MetricsRecord]) -> Result<BTreeMap<String, String>> {
    let mut digests = BTreeMap::new();
    let kv = keys_values(records).map(|kv| keys_values_csv(&kv)).unwrap_or_default();
    let files = [
        ("metrics.csv", metrics_csv(records)),
        ("keys-values.csv", kv),
        ("aggregates.csv", aggregates_text(records)),
        ("records.json", serde_json::to_string_pretty(records).expect("records serialize") + "\n"),
    ];
    for (name, text) in files {
        error::write(&out.join(name), &text)?;
        digests.insert(name.to_string(), sha256_hex(text.as_bytes()));
    }
    Ok(digests)
}

pub fn run_benchmark(config_path: &Path, opts: &RunOptions) -> Result<RunSummary> {
    let started = unix_now();
    let (mut cfg, base, cfg_bytes) = load_config(config_path)?;
    let seed_source = match opts.seed_override {
        Some(s) => {
            log::event("seed_override", json!({"variable": SEED_ENV, "config_seed": cfg.train.seed, "seed": s}));
            cfg.train.seed = s;
            SEED_ENV
        }
        None => "config",
    };
    cfg.validate()?;
    let matrix = cfg.matrix()?;
    std::fs::create_dir_all(&opts.out).at(&opts.out)?;
    let workers = pool(opts.jobs)?;
    log::event("benchmark_start", json!({"cells": matrix.len(), "jobs": opts.jobs, "seed": cfg.train.seed, "strict_repro": opts.strict_repro}));

    let datasets = load_datasets(&cfg, &base)?;
    let mut dataset_digests = BTreeMap::new();
    for (e, d) in &datasets {
        dataset_digests.insert(e.slug().to_string(), dataset_digest(d));
    }
    let warm = resolve_warmstart(&cfg, &base, &matrix, &opts.out, &workers)?;

    let root = RngStream::new(cfg.train.seed);
    let wall = WallClock::new();
    let clock: &dyn Clock = if opts.strict_repro { &NullClock } else { &wall };
    let train = &cfg.train;
    let results: Vec<Result<MetricsRecord>> = workers.install(|| {
        matrix
            .par_iter()
            .map(|config| {
                let dataset = &datasets.iter().find(|(e, _)| *e == config.experiment).expect("loaded per experiment").1;
                let warmstart = warm.get(&config.encoder.kind).map(|(s, _)| s.as_slice());
                let opts_cell = CellOptions { clock, warmstart };
                let outcome = run_experiment_cell(dataset, config, train, &cell_stream(&root, config), opts_cell);
                let result = CellResult::from_outcome(config, outcome);
                write_cell(&opts.out, &result)?;
                let r = &result.record;
                match &r.error {
                    None => log::event("cell_done", json!({"cell": config.cell_id(), "dice": r.dice, "best_epoch": result.state.as_ref().and_then(|s| s.best_epoch())})),
                    Some(e) => log::event("cell_failed", json!({"cell": config.cell_id(), "error": e})),
                }
                Ok(result.record)
            })
            .collect()
    });
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    let artifact_digests = write_tables(&opts.out, &records)?;

    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        config_path: config_path.to_path_buf(),
        config_dir: base,
        config_digest: sha256_hex(&cfg_bytes),
        seed: cfg.train.seed,
        config: cfg,
        seed_source: seed_source.into(),
        strict_repro: opts.strict_repro,
        jobs: opts.jobs,
        matrix: matrix.iter().map(ModelConfig::cell_id).collect(),
        dataset_digests,
        warmstart_digests: warm.iter().map(|(k, (_, d))| (k.name().to_string(), d.clone())).collect(),
        artifact_digests,
        started_unix: started,
        finished_unix: unix_now(),
    };
    error::write(&opts.out.join("run_manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")?;
    let summary = RunSummary { records, manifest };
    log::event("benchmark_done", json!({"cells": summary.records.len(), "failed": summary.failed()}));
    Ok(summary)
}
