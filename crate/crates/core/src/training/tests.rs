use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::dataio::{generate_synthetic, SyntheticSpec};
use crate::models::{Architecture, EncoderKind};
use crate::nn::ParamKind;

fn grid(rows: usize, cols: usize, v: Vec<f64>) -> Grid<f64> {
    Grid::new(rows, cols, v).unwrap()
}

fn eight_positives() -> Grid<u8> {
    Grid::from_fn(4, 4, |r, _| u8::from(r < 2))
}

#[test]
fn dice_worked_examples() {
    let t = eight_positives();
    let perfect = t.map(f64::from);
    let l = soft_dice_loss(&perfect, &t, 1e-5).unwrap();
    assert_eq!(l, 1.0 - 16.0 / (16.0 + 1e-5));
    assert!(l < 1e-5 && l > 0.0);
    assert_eq!(soft_dice_loss(&Grid::filled(4, 4, 0.0), &t, 1e-5).unwrap(), 1.0);
    let half = soft_dice_loss(&Grid::filled(4, 4, 0.5), &t, 1e-5).unwrap();
    assert_eq!(half, 1.0 - 8.0 / (8.0 + 4.0 + 1e-5));
    assert!((half - 0.33333).abs() < 1e-5);
    assert!(soft_dice_loss(&Grid::filled(4, 5, 0.5), &t, 1e-5).is_err());
}

#[test]
fn batch_loss_is_mean_of_samples() {
    let mut rng = RngStream::new(2);
    let pred = Tensor4::<f64>::from_fn([3, 1, 4, 4], |_| rng.unit());
    let target = Tensor4::<f64>::from_fn([3, 1, 4, 4], |_| f64::from(u8::from(rng.bernoulli(0.4))));
    let (l, _) = soft_dice_batch(&pred, &target, 1e-5).unwrap();
    let per: f64 = (0..3)
        .map(|n| {
            let p = grid(4, 4, pred.channel(n, 0).to_vec());
            let t = Grid::new(4, 4, target.channel(n, 0).iter().map(|&v| v as u8).collect()).unwrap();
            soft_dice_loss(&p, &t, 1e-5).unwrap()
        })
        .sum::<f64>()
        / 3.0;
    assert!((l - per).abs() < 1e-15);
    assert_eq!(soft_dice_batch_loss(&pred, &target, 1e-5).unwrap(), l);
}

#[test]
fn dice_gradient_matches_finite_differences() {
    let mut rng = RngStream::new(8);
    let pred = Tensor4::<f64>::from_fn([2, 1, 5, 5], |_| rng.uniform(0.05, 0.95));
    let target = Tensor4::<f64>::from_fn([2, 1, 5, 5], |_| f64::from(u8::from(rng.bernoulli(0.5))));
    let (_, g) = soft_dice_batch(&pred, &target, 1e-5).unwrap();
    let h = 1e-6;
    for i in 0..pred.numel() {
        let mut up = pred.clone();
        up.data_mut()[i] += h;
        let mut dn = pred.clone();
        dn.data_mut()[i] -= h;
        let fd = (soft_dice_batch_loss(&up, &target, 1e-5).unwrap() - soft_dice_batch_loss(&dn, &target, 1e-5).unwrap())
            / (2.0 * h);
        assert!((fd - g.data()[i]).abs() < 1e-8, "pixel {i}: {fd} vs {}", g.data()[i]);
    }
}

fn scalar_store(w: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    let id = s.add("w", [1, 1, 1, 1], ParamKind::Bias).unwrap();
    s.entry_mut(id).value.data_mut()[0] = w;
    s
}

fn set_grad(s: &mut ParamStore<f64>, g: f64) {
    let e = s.entry_mut(0);
    e.grad.data_mut()[0] = g;
    e.has_grad = true;
}

#[test]
fn adam_first_step() {
    let cfg = TrainConfig::default();
    let mut s = scalar_store(1.0);
    set_grad(&mut s, 0.1);
    adam_step(&mut s, &cfg).unwrap();
    assert!((s.value(0).data()[0] - 0.999).abs() < 1e-9);
    assert_eq!(s.step_count, 1);
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut s = scalar_store(0.7);
    for _ in 0..5 {
        set_grad(&mut s, 0.0);
        adam_step(&mut s, &TrainConfig::default()).unwrap();
    }
    assert_eq!(s.value(0).data()[0], 0.7);
}

#[test]
fn adam_requires_gradients() {
    let mut s = scalar_store(0.7);
    assert!(matches!(adam_step(&mut s, &TrainConfig::default()), Err(Error::MissingGradient(n)) if n == "w"));
    set_grad(&mut s, 1.0);
    s.zero_grad();
    assert!(adam_step(&mut s, &TrainConfig::default()).is_err());
}

#[test]
fn sgd_matches_plain_update() {
    let cfg = TrainConfig { optimizer: Optimizer::Sgd, lr: 0.5, ..TrainConfig::default() };
    let mut s = scalar_store(1.0);
    set_grad(&mut s, 0.2);
    optimizer_step(&mut s, &cfg).unwrap();
    assert_eq!(s.value(0).data()[0], 0.9);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { epochs: 0, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { beta1: 1.0, ..Default::default() },
        TrainConfig { adam_eps: 0.0, ..Default::default() },
        TrainConfig { threshold: 1.0, ..Default::default() },
        TrainConfig { lr: f64::NAN, ..Default::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

/// Replays a fixed validation-loss sequence; its "parameters" record how many
/// epochs it has trained.
struct Scripted {
    val: Vec<f64>,
    epoch: usize,
    train_calls: usize,
}

impl CellModel for Scripted {
    fn train_step(&mut self, _: &Tensor4<f32>, _: &Tensor4<f32>, _: &mut RngStream, _: &TrainConfig) -> Result<f64> {
        self.train_calls += 1;
        Ok(0.5)
    }
    fn predict(&self, x: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        Ok(Tensor4::zeros(x.shape()))
    }
    fn snapshot(&self) -> Snapshot {
        vec![("epoch".into(), Tensor4::filled([1, 1, 1, 1], self.epoch as f32))]
    }
    fn restore(&mut self, _: &Snapshot) -> Result<()> {
        Ok(())
    }
    fn param_count(&self) -> usize {
        1
    }
    fn val_loss(&mut self, _: &[(Tensor4<f32>, Tensor4<f32>)], _: f64) -> Result<f64> {
        self.epoch += 1;
        Ok(self.val[self.epoch - 1])
    }
}

fn tiny_data(n_train: usize) -> CellData {
    let pair = (Grid::filled(8, 8, 0.0), Grid::filled(8, 8, 0u8));
    CellData { shape: (8, 8), train: vec![pair.clone(); n_train], val: vec![pair.clone()], test: vec![pair] }
}

fn run_scripted(val: Vec<f64>, cfg: &TrainConfig) -> (RunState, usize) {
    let mut m = Scripted { val, epoch: 0, train_calls: 0 };
    let state = train_loop(&mut m, &tiny_data(4), cfg, &RngStream::new(1), &NullClock).unwrap();
    (state, m.train_calls)
}

#[test]
fn selection_picks_first_minimum() {
    let cfg = TrainConfig { epochs: 3, augment: false, ..Default::default() };
    let (state, _) = run_scripted(vec![0.9, 0.4, 0.6], &cfg);
    let best = state.best.unwrap();
    assert_eq!(best.epoch, 2);
    assert_eq!(best.params[0].1.data()[0], 2.0);
    assert_eq!(state.best_val_loss, 0.4);

    let cfg = TrainConfig { epochs: 4, augment: false, ..Default::default() };
    let (state, _) = run_scripted(vec![0.5, 0.3, 0.3, 0.3], &cfg);
    assert_eq!(state.best_epoch(), Some(2));
}

#[test]
fn one_epoch_full_batch() {
    let cfg = TrainConfig { epochs: 1, batch_size: 10, augment: false, ..Default::default() };
    let (state, calls) = run_scripted(vec![0.2], &cfg);
    assert_eq!(state.epoch_log.len(), 1);
    assert_eq!(calls, 1);
    // partial last batch is kept: 4 slices in batches of 3 → 2 steps
    let cfg = TrainConfig { epochs: 1, batch_size: 3, augment: false, ..Default::default() };
    assert_eq!(run_scripted(vec![0.2], &cfg).1, 2);
}

#[test]
fn non_finite_validation_aborts() {
    let cfg = TrainConfig { epochs: 2, ..Default::default() };
    let mut m = Scripted { val: vec![0.5, f64::NAN], epoch: 0, train_calls: 0 };
    let err = train_loop(&mut m, &tiny_data(2), &cfg, &RngStream::new(1), &NullClock).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
}

#[test]
fn epoch_log_csv_shape() {
    let cfg = TrainConfig { epochs: 2, augment: false, ..Default::default() };
    let (state, _) = run_scripted(vec![0.5, 0.25], &cfg);
    let csv = state.epoch_log_csv();
    assert_eq!(csv, "epoch,train_loss,val_loss,train_s,val_s\n1,0.5,0.5,0,0\n2,0.5,0.25,0,0\n");
}

fn small_dataset(seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec { n_slices: 6, shape: (32, 32), seed, balanced: true }).unwrap()
}

#[test]
fn real_cell_runs_and_is_deterministic() {
    let ds = small_dataset(3);
    let cfg = TrainConfig { epochs: 2, ..Default::default() };
    for arch in [Architecture::Fpn, Architecture::Pspnet] {
        let config = ModelConfig::new(
            ExperimentKind::LesionSegmentationB,
            arch,
            EncoderKind::Residual,
            1.0 / 16.0,
            WeightInit::Random { seed: 5 },
        );
        let rng = RngStream::new(11);
        let a = run_experiment_cell(&ds, &config, &cfg, &rng, CellOptions::default()).unwrap();
        let b = run_experiment_cell(&ds, &config, &cfg, &rng, CellOptions::default()).unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.state.epoch_log, b.state.epoch_log);
        assert_eq!(a.state.epoch_log.len(), 2);
        let r = &a.record;
        assert!(r.is_ok() && (0.0..=100.0).contains(&r.dice) && r.params_millions > 0.0);
    }
}

#[test]
fn warmstart_loads_encoder_only() {
    let ds = small_dataset(4);
    let cfg = TrainConfig { epochs: 1, ..Default::default() };
    let ck = pretrain_encoder(&ds, EncoderKind::PlainConvStack, 1.0 / 16.0, &cfg).unwrap();
    assert!(ck.params.iter().all(|(n, _)| is_encoder_param(n)));
    let config = ModelConfig::new(
        ExperimentKind::LungSegmentation,
        Architecture::Pspnet,
        EncoderKind::PlainConvStack,
        1.0 / 16.0,
        WeightInit::Warmstart { checkpoint: "enc".into(), seed: 2 },
    );
    let mut m = SegModel::new(&config, (32, 32)).unwrap();
    let report = initialize(&mut m, &config.weight_init, Some(&ck.params)).unwrap().unwrap();
    assert!(!report.loaded.is_empty() && report.loaded.iter().all(|n| is_encoder_param(n)));
    assert!(report.skipped.iter().any(|n| !is_encoder_param(n)));
    // depth-3 model ignores the two deepest pretrained stages
    assert!(!report.unused.is_empty());
    for name in &report.loaded {
        let want = &ck.params.iter().find(|(n, _)| n == name).unwrap().1;
        assert_eq!(&m.store.get(name).unwrap().value, want);
    }
    let mut m = SegModel::new(&config, (32, 32)).unwrap();
    assert!(initialize(&mut m, &config.weight_init, None).is_err());
}

#[test]
fn matrix_keeps_failures_in_order() {
    let configs: Vec<ModelConfig> = Architecture::ALL
        .iter()
        .map(|&a| ModelConfig::new(ExperimentKind::LungSegmentation, a, EncoderKind::Residual, 0.1, WeightInit::Random { seed: 1 }))
        .collect();
    let results = run_matrix(&configs, |i, c| {
        if i == 2 {
            return Err(Error::NonFinite("forced".into()));
        }
        let mut record = MetricsRecord::failed(c.experiment, c.architecture, c.encoder.kind, "None", String::new());
        record.status = Status::Ok;
        Ok(CellOutcome { state: RunState::default(), record })
    })
    .unwrap();
    assert_eq!(results.len(), 4);
    assert_eq!(results.iter().filter(|r| r.record.is_ok()).count(), 3);
    assert_eq!(results[2].record.status, Status::Failed);
    assert!(results.iter().zip(&configs).all(|(r, c)| r.record.architecture == c.architecture));
    assert!(run_matrix(&[], |_, _| unreachable!()).is_err());
}

#[test]
fn cell_streams_depend_on_identity() {
    let root = RngStream::new(1);
    let a = ModelConfig::new(ExperimentKind::LungSegmentation, Architecture::Unet, EncoderKind::Residual, 0.1, WeightInit::Random { seed: 1 });
    let mut b = a.clone();
    b.experiment = ExperimentKind::LesionSegmentationA;
    assert_eq!(cell_stream(&root, &a), cell_stream(&root, &a.clone()));
    assert_ne!(cell_stream(&root, &a), cell_stream(&root, &b));
}
