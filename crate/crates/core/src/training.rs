//! Soft Dice loss, Adam, and the per-cell train / select / test loop.
//!
//! A cell trains for a fixed number of epochs. After every epoch the full
//! validation split is scored with the same Soft Dice loss, and the parameters
//! are snapshotted whenever that loss strictly improves, so ties keep the earlier
//! epoch. The best snapshot is then evaluated on the test split with the hard
//! metrics.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::augment::{self, sample_params};
use crate::dataio::{select_target, Dataset, ExperimentKind};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::{mean_slice_metrics, EmptyRule, MetricsRecord, Status, DEFAULT_THRESHOLD, METRIC_EPS};
use crate::models::{build, is_encoder_param, Model, ModelConfig, WeightInit};
use crate::nn::{load_named, Mode, ParamStore, Tape, Tensor4, WarmstartReport};
use crate::real::Real;
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
    /// Plain `w -= lr * g`.
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Soft Dice denominator guard.
    pub loss_eps: f64,
    /// Binarization threshold for the hard metrics.
    pub threshold: f64,
    pub optimizer: Optimizer,
    /// Random flips / rotation / scaling of training samples.
    pub augment: bool,
    pub metric_eps: f64,
    pub empty_rule: EmptyRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 2,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            loss_eps: 1e-5,
            threshold: DEFAULT_THRESHOLD,
            optimizer: Optimizer::Adam,
            augment: true,
            metric_eps: METRIC_EPS,
            empty_rule: EmptyRule::PaperLiteral,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(what));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad(format!("epochs ({}) and batch_size ({}) must be >= 1", self.epochs, self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {b}"));
            }
        }
        for (name, e) in [("adam_eps", self.adam_eps), ("loss_eps", self.loss_eps), ("metric_eps", self.metric_eps)] {
            if !(e > 0.0 && e.is_finite()) {
                return bad(format!("{name} must be positive, got {e}"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        Ok(())
    }
}

/// `1 - 2 Σ y p / (Σ y² + Σ p² + eps)` for one sample.
pub fn soft_dice_loss(pred: &Grid<f64>, target: &Grid<u8>, eps: f64) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let (l, _) = dice_terms(pred.as_slice().iter().copied(), target.as_slice().iter().map(|&t| f64::from(t)), eps);
    Ok(l)
}

/// Returns `(loss, (intersection, denominator))`, accumulated in `f64`.
fn dice_terms(pred: impl Iterator<Item = f64>, target: impl Iterator<Item = f64>, eps: f64) -> (f64, (f64, f64)) {
    let (mut inter, mut sq) = (0.0, 0.0);
    for (p, y) in pred.zip(target) {
        inter += y * p;
        sq += y * y + p * p;
    }
    let den = sq + eps;
    (1.0 - 2.0 * inter / den, (inter, den))
}

/// Mean per-sample Soft Dice over a `(B, 1, H, W)` batch and its gradient with
/// respect to `pred`.
pub fn soft_dice_batch<T: Real>(pred: &Tensor4<T>, target: &Tensor4<T>, eps: f64) -> Result<(f64, Tensor4<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let [b, ..] = pred.shape();
    let per = pred.numel() / b;
    let mut grad = Tensor4::zeros(pred.shape());
    let mut total = 0.0;
    for n in 0..b {
        let range = n * per..(n + 1) * per;
        let p = &pred.data()[range.clone()];
        let y = &target.data()[range.clone()];
        let (l, (inter, den)) = dice_terms(p.iter().map(|&v| Real::to_f64(v)), y.iter().map(|&v| Real::to_f64(v)), eps);
        total += l;
        // dL/dp = (-2 y den + 4 p inter) / den², averaged over the batch
        let scale = 1.0 / (b as f64 * den * den);
        for ((g, &pv), &yv) in grad.data_mut()[range].iter_mut().zip(p).zip(y) {
            *g = T::lit((-2.0 * Real::to_f64(yv) * den + 4.0 * Real::to_f64(pv) * inter) * scale);
        }
    }
    Ok((total / b as f64, grad))
}

/// Mean per-sample Soft Dice of a batch, no gradient.
pub fn soft_dice_batch_loss<T: Real>(pred: &Tensor4<T>, target: &Tensor4<T>, eps: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let [b, ..] = pred.shape();
    let per = pred.numel() / b;
    let total: f64 = (0..b)
        .map(|n| {
            let r = n * per..(n + 1) * per;
            dice_terms(pred.data()[r.clone()].iter().map(|&v| Real::to_f64(v)), target.data()[r].iter().map(|&v| Real::to_f64(v)), eps).0
        })
        .sum();
    Ok(total / b as f64)
}

fn require_grads<T: Real>(store: &ParamStore<T>) -> Result<()> {
    match store.iter().find(|e| e.kind.trainable() && !e.has_grad) {
        Some(e) => Err(Error::MissingGradient(e.name.clone())),
        None => Ok(()),
    }
}

/// One bias-corrected Adam update of every trainable entry.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, cfg: &TrainConfig) -> Result<()> {
    require_grads(store)?;
    store.step_count += 1;
    let t = store.step_count as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - libm::pow(b1, f64::from(t));
    let c2 = 1.0 - libm::pow(b2, f64::from(t));
    for e in store.iter_mut().filter(|e| e.kind.trainable()) {
        let n = e.value.numel();
        for i in 0..n {
            let w = Real::to_f64(e.value.data()[i]);
            let g = Real::to_f64(e.grad.data()[i]) + cfg.weight_decay * w;
            let m = b1 * Real::to_f64(e.adam_m.data()[i]) + (1.0 - b1) * g;
            let v = b2 * Real::to_f64(e.adam_v.data()[i]) + (1.0 - b2) * g * g;
            e.adam_m.data_mut()[i] = T::lit(m);
            e.adam_v.data_mut()[i] = T::lit(v);
            let step = cfg.lr * (m / c1) / (libm::sqrt(v / c2) + cfg.adam_eps);
            e.value.data_mut()[i] = T::lit(w - step);
        }
    }
    Ok(())
}

/// `w -= lr * (g + weight_decay * w)`.
pub fn sgd_step<T: Real>(store: &mut ParamStore<T>, cfg: &TrainConfig) -> Result<()> {
    require_grads(store)?;
    store.step_count += 1;
    for e in store.iter_mut().filter(|e| e.kind.trainable()) {
        for (w, &g) in e.value.data_mut().iter_mut().zip(e.grad.data()) {
            let wf = Real::to_f64(*w);
            *w = T::lit(wf - cfg.lr * (Real::to_f64(g) + cfg.weight_decay * wf));
        }
    }
    Ok(())
}

pub fn optimizer_step<T: Real>(store: &mut ParamStore<T>, cfg: &TrainConfig) -> Result<()> {
    match cfg.optimizer {
        Optimizer::Adam => adam_step(store, cfg),
        Optimizer::Sgd => sgd_step(store, cfg),
    }
}

/// Wall-clock source for the timing columns. [`NullClock`] keeps runs byte-reproducible.
pub trait Clock: Sync {
    /// Seconds since an arbitrary fixed origin.
    fn seconds(&self) -> f64;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// Named parameter values, the unit of checkpointing.
pub type Snapshot = Vec<(String, Tensor4<f32>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub val_loss: f64,
    pub params: Snapshot,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_s: f64,
    pub val_s: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,val_loss,train_s,val_s";

#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub best_val_loss: f64,
    pub best: Option<Checkpoint>,
    pub epoch_log: Vec<EpochLog>,
    pub warmstart: Option<WarmstartReport>,
}

impl Default for RunState {
    fn default() -> Self {
        Self { best_val_loss: f64::INFINITY, best: None, epoch_log: Vec::new(), warmstart: None }
    }
}

impl RunState {
    /// Logs an epoch; returns whether it became the new best (strictly lower loss).
    pub fn observe(&mut self, log: EpochLog, snapshot: impl FnOnce() -> Snapshot) -> Result<bool> {
        if !log.val_loss.is_finite() || !log.train_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "epoch {}: train loss {}, validation loss {}",
                log.epoch, log.train_loss, log.val_loss
            )));
        }
        if let Some(last) = self.epoch_log.last() {
            if log.epoch <= last.epoch {
                return Err(Error::InvalidParameter(format!("epoch {} logged after {}", log.epoch, last.epoch)));
            }
        }
        self.epoch_log.push(log);
        if log.val_loss < self.best_val_loss {
            self.best_val_loss = log.val_loss;
            self.best = Some(Checkpoint { epoch: log.epoch, val_loss: log.val_loss, params: snapshot() });
            return Ok(true);
        }
        Ok(false)
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|c| c.epoch)
    }

    pub fn epoch_log_csv(&self) -> String {
        let mut out = String::from(EPOCH_LOG_HEADER);
        out.push('\n');
        for l in &self.epoch_log {
            out.push_str(&format!("{},{},{},{},{}\n", l.epoch, l.train_loss, l.val_loss, l.train_s, l.val_s));
        }
        out
    }

    fn mean_timings(&self) -> (f64, f64) {
        let n = self.epoch_log.len().max(1) as f64;
        (
            self.epoch_log.iter().map(|l| l.train_s).sum::<f64>() / n,
            self.epoch_log.iter().map(|l| l.val_s).sum::<f64>() / n,
        )
    }
}

/// What the epoch loop needs from a model.
pub trait CellModel {
    /// Forward, backward and one optimizer step on a batch; returns the batch's mean loss.
    fn train_step(&mut self, x: &Tensor4<f32>, y: &Tensor4<f32>, rng: &mut RngStream, cfg: &TrainConfig) -> Result<f64>;

    /// Eval-mode probabilities.
    fn predict(&self, x: &Tensor4<f32>) -> Result<Tensor4<f32>>;

    fn snapshot(&self) -> Snapshot;

    fn restore(&mut self, params: &Snapshot) -> Result<()>;

    fn param_count(&self) -> usize;

    /// Mean per-sample Soft Dice over the batches.
    fn val_loss(&mut self, batches: &[(Tensor4<f32>, Tensor4<f32>)], eps: f64) -> Result<f64> {
        let (mut total, mut n) = (0.0, 0usize);
        for (x, y) in batches {
            let b = x.shape()[0];
            total += soft_dice_batch_loss(&self.predict(x)?, y, eps)? * b as f64;
            n += b;
        }
        if n == 0 {
            return Err(Error::EmptySplit("val".into()));
        }
        Ok(total / n as f64)
    }
}

/// A built network and its 32-bit parameters.
pub struct SegModel {
    pub model: Model,
    pub store: ParamStore<f32>,
}

impl SegModel {
    pub fn new(config: &ModelConfig, input_shape: (usize, usize)) -> Result<Self> {
        let (model, store) = build(config, input_shape)?;
        Ok(Self { model, store })
    }
}

impl CellModel for SegModel {
    fn train_step(&mut self, x: &Tensor4<f32>, y: &Tensor4<f32>, rng: &mut RngStream, cfg: &TrainConfig) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = self.model.forward(&mut tape, &self.store, xv, Mode::Train, Some(rng))?;
        let (loss, seed) = soft_dice_batch(tape.value(out), y, cfg.loss_eps)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss}")));
        }
        let grads = tape.backward(out, seed)?;
        self.store.zero_grad();
        tape.accumulate_param_grads(&grads, &mut self.store);
        tape.apply_running_updates(&mut self.store);
        optimizer_step(&mut self.store, cfg)?;
        Ok(loss)
    }

    fn predict(&self, x: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        self.model.predict(&self.store, x)
    }

    fn snapshot(&self) -> Snapshot {
        self.store.snapshot()
    }

    fn restore(&mut self, params: &Snapshot) -> Result<()> {
        load_named(&mut self.store, params, true).map(|_| ())
    }

    fn param_count(&self) -> usize {
        self.store.count_params()
    }
}

/// Network input and target for every slice of each split, after
/// normalization and (for the gated experiment) lung gating.
#[derive(Clone, Debug)]
pub struct CellData {
    pub shape: (usize, usize),
    pub train: Vec<(Grid<f64>, Grid<u8>)>,
    pub val: Vec<(Grid<f64>, Grid<u8>)>,
    pub test: Vec<(Grid<f64>, Grid<u8>)>,
}

impl CellData {
    pub fn prepare(dataset: &Dataset, experiment: ExperimentKind) -> Result<Self> {
        dataset.validate()?;
        let norm = dataset.normalized()?;
        let pick = |slices: &[crate::dataio::Slice]| {
            slices.iter().map(|s| select_target(s, experiment)).collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            shape: dataset.slice_shape().expect("validated non-empty train split"),
            train: pick(&norm.train)?,
            val: pick(&norm.val)?,
            test: pick(&norm.test)?,
        })
    }
}

/// Stacks `(image, mask)` pairs into `(B, 1, H, W)` input and target tensors.
pub fn to_batch<'a>(pairs: impl IntoIterator<Item = (&'a Grid<f64>, &'a Grid<u8>)>) -> (Tensor4<f32>, Tensor4<f32>) {
    let (mut xs, mut ys, mut n, mut hw) = (Vec::new(), Vec::new(), 0, (0, 0));
    for (img, mask) in pairs {
        hw = img.shape();
        xs.extend(img.as_slice().iter().map(|&v| v as f32));
        ys.extend(mask.as_slice().iter().map(|&v| f32::from(v)));
        n += 1;
    }
    let shape = [n, 1, hw.0, hw.1];
    (
        Tensor4::from_vec(shape, xs).expect("uniform slice shapes"),
        Tensor4::from_vec(shape, ys).expect("uniform slice shapes"),
    )
}

fn batches(pairs: &[(Grid<f64>, Grid<u8>)], batch_size: usize) -> Vec<(Tensor4<f32>, Tensor4<f32>)> {
    pairs.chunks(batch_size).map(|c| to_batch(c.iter().map(|(x, y)| (x, y)))).collect()
}

/// Sub-stream labels under a cell's stream.
const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

/// The epoch loop with argmin-validation model selection. Streams for shuffling,
/// augmentation and dropout are split per epoch from `rng`.
pub fn train_loop(
    model: &mut dyn CellModel,
    data: &CellData,
    cfg: &TrainConfig,
    rng: &RngStream,
    clock: &dyn Clock,
) -> Result<RunState> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if data.val.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    let val_batches = batches(&data.val, cfg.batch_size);
    let mut state = RunState::default();
    for epoch in 1..=cfg.epochs {
        let e = epoch as u64;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        rng.split(SHUFFLE_STREAM).split(e).shuffle(&mut order);
        let mut aug = rng.split(AUGMENT_STREAM).split(e);
        let mut drop = rng.split(DROPOUT_STREAM).split(e);

        let t0 = clock.seconds();
        let (mut total, mut n_batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut pairs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (img, mask) = &data.train[i];
                pairs.push(if cfg.augment { augment::apply(img, mask, &sample_params(&mut aug))? } else { (img.clone(), mask.clone()) });
            }
            let (x, y) = to_batch(pairs.iter().map(|(a, b)| (a, b)));
            let loss = model.train_step(&x, &y, &mut drop, cfg)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch}, batch {}: training loss {loss}", n_batches + 1)));
            }
            total += loss * chunk.len() as f64;
            n_batches += 1;
        }
        let t1 = clock.seconds();
        let val_loss = model.val_loss(&val_batches, cfg.loss_eps)?;
        let t2 = clock.seconds();
        let log = EpochLog {
            epoch,
            train_loss: total / data.train.len() as f64,
            val_loss,
            train_s: (t1 - t0) / n_batches as f64,
            val_s: (t2 - t1) / val_batches.len() as f64,
        };
        state.observe(log, || model.snapshot())?;
    }
    Ok(state)
}

/// Probabilities for every pair, batched.
pub fn predict_all(model: &dyn CellModel, pairs: &[(Grid<f64>, Grid<u8>)], batch_size: usize) -> Result<Vec<Grid<f64>>> {
    let mut out = Vec::with_capacity(pairs.len());
    for (x, _) in batches(pairs, batch_size.max(1)) {
        let p = model.predict(&x)?;
        let [b, _, h, w] = p.shape();
        for n in 0..b {
            out.push(Grid::new(h, w, p.channel(n, 0).iter().map(|&v| f64::from(v)).collect())?);
        }
    }
    Ok(out)
}

/// Per-slice hard metrics of `model` on `pairs`, as percentages.
pub fn evaluate_pairs(model: &dyn CellModel, pairs: &[(Grid<f64>, Grid<u8>)], cfg: &TrainConfig) -> Result<(f64, f64, f64)> {
    let preds = predict_all(model, pairs, cfg.batch_size)?;
    let targets: Vec<Grid<u8>> = pairs.iter().map(|(_, m)| m.clone()).collect();
    let m = mean_slice_metrics(&preds, &targets, cfg.threshold, cfg.metric_eps, cfg.empty_rule)?;
    Ok((100.0 * m.sens, 100.0 * m.spec, 100.0 * m.dice))
}

/// Extra inputs for one cell.
#[derive(Clone, Copy)]
pub struct CellOptions<'a> {
    pub clock: &'a dyn Clock,
    /// Tensors for a warm-start cell; only encoder entries are used.
    pub warmstart: Option<&'a [(String, Tensor4<f32>)]>,
}

impl Default for CellOptions<'_> {
    fn default() -> Self {
        Self { clock: &NullClock, warmstart: None }
    }
}

#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub state: RunState,
    pub record: MetricsRecord,
}

/// Initializes parameters from the cell's weight-init spec.
pub fn initialize(model: &mut SegModel, init: &WeightInit, warmstart: Option<&[(String, Tensor4<f32>)]>) -> Result<Option<WarmstartReport>> {
    model.store.init_random(&RngStream::new(init.seed()));
    match init {
        WeightInit::Random { .. } => Ok(None),
        WeightInit::Warmstart { checkpoint, .. } => {
            let tensors = warmstart
                .ok_or_else(|| Error::Config(format!("warm-start tensors for {checkpoint} were not provided")))?;
            let encoder: Snapshot = tensors.iter().filter(|(n, _)| is_encoder_param(n)).cloned().collect();
            if encoder.is_empty() {
                return Err(Error::Checkpoint(format!("{checkpoint} holds no encoder parameters")));
            }
            let report = load_named(&mut model.store, &encoder, false)?;
            if report.loaded.is_empty() {
                return Err(Error::Checkpoint(format!("no parameter of {checkpoint} matches the model")));
            }
            Ok(Some(report))
        }
    }
}

/// Trains one benchmark cell, restores its best epoch and scores it on the test split.
pub fn run_experiment_cell(
    dataset: &Dataset,
    config: &ModelConfig,
    cfg: &TrainConfig,
    rng: &RngStream,
    opts: CellOptions<'_>,
) -> Result<CellOutcome> {
    cfg.validate()?;
    if !dataset.supports(config.experiment) {
        return Err(Error::Config(format!("dataset {} lacks lung masks required by {}", dataset.name, config.experiment.slug())));
    }
    let data = CellData::prepare(dataset, config.experiment)?;
    if data.test.is_empty() {
        return Err(Error::EmptySplit("test".into()));
    }
    let mut model = SegModel::new(config, data.shape)?;
    let warm = initialize(&mut model, &config.weight_init, opts.warmstart)?;
    let mut state = train_loop(&mut model, &data, cfg, rng, opts.clock)?;
    state.warmstart = warm;
    let best = state.best.as_ref().ok_or_else(|| Error::NonFinite("no epoch produced a finite validation loss".into()))?;
    model.restore(&best.params)?;
    let (sens, spec, dice) = evaluate_pairs(&model, &data.test, cfg)?;
    let (train_s, val_s) = state.mean_timings();
    let record = MetricsRecord {
        experiment: config.experiment,
        architecture: config.architecture,
        encoder: config.encoder.kind,
        weight_init: config.weight_init.label().to_string(),
        sens,
        spec,
        dice,
        params_millions: model.param_count() as f64 / 1e6,
        train_s_per_batch: train_s,
        val_s_per_batch: val_s,
        status: Status::Ok,
        error: None,
    };
    Ok(CellOutcome { state, record })
}

/// 64-bit FNV-1a, used to derive stable per-cell stream labels.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// A cell's stream depends only on the root seed and the cell identity, not on
/// its position in the matrix or the order of execution.
pub fn cell_stream(root: &RngStream, config: &ModelConfig) -> RngStream {
    root.split(stable_hash(&config.cell_id()))
}

/// Outcome of one matrix cell; failures are kept, not dropped.
pub struct CellResult {
    pub config: ModelConfig,
    pub record: MetricsRecord,
    pub state: Option<RunState>,
}

impl CellResult {
    pub fn from_outcome(config: &ModelConfig, outcome: Result<CellOutcome>) -> Self {
        match outcome {
            Ok(o) => Self { config: config.clone(), record: o.record, state: Some(o.state) },
            Err(e) => Self {
                config: config.clone(),
                record: MetricsRecord::failed(
                    config.experiment,
                    config.architecture,
                    config.encoder.kind,
                    config.weight_init.label(),
                    e.to_string(),
                ),
                state: None,
            },
        }
    }
}

/// Runs every cell through `run` and returns results in matrix order.
pub fn run_matrix<F>(matrix: &[ModelConfig], mut run: F) -> Result<Vec<CellResult>>
where
    F: FnMut(usize, &ModelConfig) -> Result<CellOutcome>,
{
    if matrix.is_empty() {
        return Err(Error::EmptyInput("benchmark matrix has no cells".into()));
    }
    Ok(matrix.iter().enumerate().map(|(i, c)| CellResult::from_outcome(c, run(i, c))).collect())
}

/// Serial benchmark over the matrix with one dataset per experiment.
pub fn run_benchmark(
    matrix: &[ModelConfig],
    datasets: &[(ExperimentKind, Dataset)],
    cfg: &TrainConfig,
    warmstart: &dyn Fn(&ModelConfig) -> Result<Option<Snapshot>>,
    clock: &dyn Clock,
) -> Result<Vec<CellResult>> {
    let root = RngStream::new(cfg.seed);
    run_matrix(matrix, |_, config| {
        let dataset = datasets
            .iter()
            .find(|(k, _)| *k == config.experiment)
            .map(|(_, d)| d)
            .ok_or_else(|| Error::Config(format!("no dataset for {}", config.experiment.slug())))?;
        let warm = warmstart(config)?;
        let opts = CellOptions { clock, warmstart: warm.as_deref() };
        run_experiment_cell(dataset, config, cfg, &cell_stream(&root, config), opts)
    })
}

/// Trains the encoder that warm-start cells load: a Unet over `kind`, fitted to
/// lung segmentation on `dataset`. Returns the encoder entries of its best epoch.
pub fn pretrain_encoder(
    dataset: &Dataset,
    kind: crate::models::EncoderKind,
    width_scale: f64,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    let config = ModelConfig::new(
        ExperimentKind::LungSegmentation,
        crate::models::Architecture::Unet,
        kind,
        width_scale,
        WeightInit::Random { seed: cfg.seed },
    );
    let data = CellData::prepare(dataset, config.experiment)?;
    let mut model = SegModel::new(&config, data.shape)?;
    initialize(&mut model, &config.weight_init, None)?;
    let state = train_loop(&mut model, &data, cfg, &RngStream::new(cfg.seed).split(stable_hash("pretrain")), &NullClock)?;
    let best = state.best.ok_or_else(|| Error::NonFinite("pretraining produced no finite validation loss".into()))?;
    Ok(Checkpoint {
        epoch: best.epoch,
        val_loss: best.val_loss,
        params: best.params.into_iter().filter(|(n, _)| is_encoder_param(n)).collect(),
    })
}

#[cfg(test)]
mod tests;
