//! The `evaluate` and `report` commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use segbench_core::dataio::{select_target, Dataset, ExperimentKind, SplitName};
use segbench_core::metrics::{binarize, MetricsRecord, Status};
use segbench_core::report::{compute_histogram, dice_vs_params, stack_volume, weight_grid_pgm, HistogramSource};
use segbench_core::training::{evaluate_pairs, predict_all, CellModel, SegModel, TrainConfig};
use segbench_core::Grid;

use crate::checkpoint;
use crate::error::{self, Error, Result};
use crate::log;
use crate::runner::{aggregates_text, load_config, RunManifest};
use crate::segb;

/// Rebuilds the model stored in a checkpoint.
pub fn load_model(path: &Path, input_shape: (usize, usize)) -> Result<SegModel> {
    let c = checkpoint::read(path)?;
    let config =
        c.model_config.ok_or_else(|| Error::format(path, "checkpoint carries no model config (encoder-only?)"))?;
    let mut model = SegModel::new(&config, input_shape).map_err(|e| Error::in_file(path, e))?;
    model.restore(&c.checkpoint.params).map_err(|e| Error::in_file(path, e))?;
    Ok(model)
}

/// Network inputs and targets of one split for an experiment, preprocessed as in training.
pub fn split_pairs(ds: &Dataset, experiment: ExperimentKind, split: SplitName) -> Result<Vec<(Grid<f64>, Grid<u8>)>> {
    let norm = ds.normalized()?;
    let pairs = norm.split(split).iter().map(|s| select_target(s, experiment)).collect::<segbench_core::Result<Vec<_>>>()?;
    if pairs.is_empty() {
        return Err(Error::Core(segbench_core::Error::EmptySplit(split.as_str().into())));
    }
    Ok(pairs)
}

/// Scores a checkpoint on one split; no training.
pub fn evaluate(
    ckpt: &Path,
    ds: &Dataset,
    experiment: ExperimentKind,
    split: SplitName,
    cfg: &TrainConfig,
) -> Result<MetricsRecord> {
    let pairs = split_pairs(ds, experiment, split)?;
    let model = load_model(ckpt, pairs[0].0.shape())?;
    let (sens, spec, dice) = evaluate_pairs(&model, &pairs, cfg)?;
    let mc = model.model.config();
    Ok(MetricsRecord {
        experiment,
        architecture: mc.architecture,
        encoder: mc.encoder.kind,
        weight_init: mc.weight_init.label().to_string(),
        sens,
        spec,
        dice,
        params_millions: model.param_count() as f64 / 1e6,
        train_s_per_batch: 0.0,
        val_s_per_batch: 0.0,
        status: Status::Ok,
        error: None,
    })
}

#[derive(Clone, Debug, Default)]
pub struct ReportOptions {
    pub histograms: bool,
    pub bins: usize,
    pub scatter: bool,
    pub weights: Option<String>,
    pub volumes: bool,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = String::from_utf8(error::read(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next() != Some(segbench_core::metrics::METRICS_HEADER) {
        return Err(Error::format(path, "missing or unexpected header"));
    }
    lines.map(|l| MetricsRecord::parse_csv_row(l).map_err(|e| Error::in_file(path, e))).collect()
}

fn read_run_manifest(run: &Path) -> Result<RunManifest> {
    let path = run.join("run_manifest.json");
    serde_json::from_slice(&error::read(&path)?).map_err(|source| Error::Json { path, source })
}

/// Writes the requested report files under `<run>/report`; returns their paths.
pub fn report(run: &Path, opts: &ReportOptions) -> Result<Vec<PathBuf>> {
    if !run.is_dir() {
        return Err(Error::Usage(format!("run directory {} does not exist", run.display())));
    }
    let records = read_metrics(&run.join("metrics.csv"))?;
    let out = run.join("report");
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = out.join(name);
        error::write(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    put("aggregates.csv".into(), aggregates_text(&records).into_bytes())?;

    if opts.scatter {
        let dp = dice_vs_params(&records)?;
        put("dice_vs_params.csv".into(), dp.scatter_csv().into_bytes())?;
        put("dice_vs_params.json".into(), (json!({"pearson_r": dp.pearson_r, "n": dp.n}).to_string() + "\n").into_bytes())?;
    }

    let needs_data = opts.histograms || opts.volumes;
    let datasets: BTreeMap<ExperimentKind, Dataset> = if needs_data {
        let manifest = read_run_manifest(run)?;
        let (cfg, base) = (&manifest.config, &manifest.config_dir);
        let mut m = BTreeMap::new();
        for e in cfg.experiments()? {
            m.insert(e, cfg.dataset_for(e)?.load(base)?);
        }
        m
    } else {
        BTreeMap::new()
    };

    if opts.histograms {
        for (e, ds) in &datasets {
            let norm = ds.normalized()?;
            let slices: Vec<_> = norm.all_slices().cloned().collect();
            for (src, tag) in [(HistogramSource::Images, "images"), (HistogramSource::Masks, "masks")] {
                let h = compute_histogram(&slices, src, opts.bins, None)?;
                put(format!("histogram_{}_{tag}.csv", e.slug()), h.to_csv().into_bytes())?;
            }
        }
    }

    let cells = || records.iter().filter(|r| r.is_ok()).map(|r| {
        let id = format!("{}__{}__{}__{}", r.experiment.slug(), r.architecture.name(), r.encoder.name(), r.weight_init);
        let ck = run.join("runs").join(&id).join("best.ckpt");
        (r, id, ck)
    });

    if let Some(layer) = &opts.weights {
        let mut any = false;
        let mut known: Vec<String> = Vec::new();
        for (_, id, ck) in cells() {
            let c = checkpoint::read(&ck)?;
            let config = c.model_config.ok_or_else(|| Error::format(&ck, "no model config"))?;
            // the layer layout does not depend on the input size
            let side = 1usize << config.encoder.depth;
            let mut model = SegModel::new(&config, (side, side))?;
            model.restore(&c.checkpoint.params).map_err(|e| Error::in_file(&ck, e))?;
            if let Ok(pgm) = weight_grid_pgm(&model.store, layer, segbench_core::report::DEFAULT_WEIGHT_CLIP) {
                put(format!("weights/{id}.pgm"), pgm)?;
                any = true;
            } else if known.is_empty() {
                known = c.checkpoint.params.iter().filter(|(n, _)| n.ends_with("conv.weight")).map(|(n, _)| n.clone()).take(4).collect();
            }
        }
        if !any {
            return Err(Error::Usage(format!(
                "no checkpoint in {} has a conv layer named {layer} (e.g. {})",
                run.display(),
                known.join(", ")
            )));
        }
    }

    if opts.volumes {
        for (r, id, ck) in cells() {
            let ds = &datasets[&r.experiment];
            let pairs = split_pairs(ds, r.experiment, SplitName::Test)?;
            let model = load_model(&ck, pairs[0].0.shape())?;
            let preds = predict_all(&model, &pairs, 4)?;
            let mut by_volume: BTreeMap<&str, Vec<(u32, Grid<u8>)>> = BTreeMap::new();
            for (s, p) in ds.test.iter().zip(&preds) {
                by_volume.entry(&s.volume_id).or_default().push((s.slice_index, binarize(p, 0.5)));
            }
            for (vol, mut masks) in by_volume {
                masks.sort_by_key(|(i, _)| *i);
                let v = stack_volume(&masks)?;
                put(format!("volumes/{id}/{vol}.segb3"), segb::encode_volume(&v))?;
            }
        }
    }
    log::event("report_done", json!({"run": run.display().to_string(), "files": written.len()}));
    Ok(written)
}

/// Re-reads a benchmark config; shared by the CLI to validate before running.
pub fn check_config(path: &Path) -> Result<()> {
    let (cfg, _, _) = load_config(path)?;
    cfg.validate()
}
