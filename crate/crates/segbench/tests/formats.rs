use std::fs;
use std::path::Path;

use segbench::checkpoint::{self, Container};
use segbench::manifest::{dataset_digest, load_dataset, write_dataset};
use segbench::segb::{self, Raster};
use segbench_core::dataio::{generate_synthetic, ExperimentKind, SyntheticSpec};
use segbench_core::models::{Architecture, EncoderKind, ModelConfig, WeightInit};
use segbench_core::report::Volume;
use segbench_core::training::{initialize, CellModel, Checkpoint, SegModel};
use segbench_core::{Grid, RngStream};

fn random_image(rng: &mut RngStream, rows: usize, cols: usize) -> Grid<f32> {
    Grid::from_fn(rows, cols, |_, _| rng.uniform(-1500.0, 1500.0) as f32)
}

#[test]
fn segb_round_trips_random_rasters() {
    let mut rng = RngStream::new(3);
    for _ in 0..50 {
        let (r, c) = (1 + rng.below(40), 1 + rng.below(40));
        let img = Raster::F32(random_image(&mut rng, r, c));
        assert_eq!(segb::decode(&segb::encode(&img)).unwrap(), img);
        let mask = Raster::U8(Grid::from_fn(r, c, |_, _| rng.below(2) as u8));
        assert_eq!(segb::decode(&segb::encode(&mask)).unwrap(), mask);
    }
}

#[test]
fn segb_files_round_trip_and_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let img = Grid::from_fn(5, 7, |r, c| (r * 7 + c) as f64 - 10.0);
    let p = dir.path().join("a_image.segb");
    segb::write_image(&p, &img).unwrap();
    assert_eq!(segb::read_image(&p).unwrap(), img);

    let mut bytes = fs::read(&p).unwrap();
    bytes[1] = b'Z';
    fs::write(&p, &bytes).unwrap();
    let msg = segb::read_image(&p).unwrap_err().to_string();
    assert!(msg.contains("a_image.segb") && msg.contains("magic"), "{msg}");

    let m = dir.path().join("bad_mask.segb");
    fs::write(&m, segb::encode(&Raster::U8(Grid::filled(2, 2, 3)))).unwrap();
    let msg = segb::read_mask(&m).unwrap_err().to_string();
    assert!(msg.contains("bad_mask.segb"), "{msg}");

    let nan = Grid::filled(1, 1, f64::NAN);
    assert!(segb::write_image(&dir.path().join("nan.segb"), &nan).is_err());
}

#[test]
fn segb_volume_round_trip() {
    let mut rng = RngStream::new(9);
    let data: Vec<u8> = (0..3 * 4 * 5).map(|_| rng.below(2) as u8).collect();
    let v = Volume::new(3, 4, 5, data).unwrap();
    let bytes = segb::encode_volume(&v);
    assert_eq!(&bytes[..4], b"SEGB");
    assert_eq!(bytes.len(), 18 + 60);
    assert_eq!(segb::decode_volume(&bytes).unwrap(), v);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("vol.segb3");
    segb::write_volume(&p, &v).unwrap();
    assert_eq!(segb::read_volume(&p).unwrap(), v);
    assert!(segb::decode_volume(&bytes[..bytes.len() - 1]).is_err());
}

fn trained_like_model() -> (ModelConfig, SegModel) {
    let cfg = ModelConfig::new(
        ExperimentKind::LungSegmentation,
        Architecture::Linknet,
        EncoderKind::Residual,
        0.125,
        WeightInit::Random { seed: 4 },
    );
    let mut m = SegModel::new(&cfg, (32, 32)).unwrap();
    initialize(&mut m, &cfg.weight_init, None).unwrap();
    (cfg, m)
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (cfg, m) = trained_like_model();
    let c = Container {
        model_config: Some(cfg.clone()),
        checkpoint: Checkpoint { epoch: 7, val_loss: 0.125, params: m.snapshot() },
    };
    let bytes = checkpoint::encode(&c);
    assert_eq!(checkpoint::decode(&bytes).unwrap(), c);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("best.ckpt");
    checkpoint::write(&p, &c).unwrap();
    let back = checkpoint::read(&p).unwrap();
    let mut m2 = SegModel::new(&cfg, (32, 32)).unwrap();
    m2.restore(&back.checkpoint.params).unwrap();
    assert_eq!(m2.snapshot(), m.snapshot());
}

fn corrupt(bytes: &[u8], f: impl FnOnce(&mut Vec<u8>)) -> Vec<u8> {
    let mut b = bytes.to_vec();
    f(&mut b);
    b
}

#[test]
fn checkpoint_rejects_corruption_with_file_name() {
    let (cfg, m) = trained_like_model();
    let c = Container { model_config: Some(cfg), checkpoint: Checkpoint { epoch: 1, val_loss: 0.5, params: m.snapshot() } };
    let good = checkpoint::encode(&c);
    let hlen = u64::from_le_bytes(good[..8].try_into().unwrap()) as usize;
    let cases: Vec<(&str, Vec<u8>)> = vec![
        ("truncated", good[..good.len() - 3].to_vec()),
        ("trailing", corrupt(&good, |b| b.push(0))),
        ("header length", corrupt(&good, |b| b[..8].copy_from_slice(&u64::MAX.to_le_bytes()))),
        ("header json", corrupt(&good, |b| b[8] = b'!')),
        ("format tag", {
            let h = String::from_utf8(good[8..8 + hlen].to_vec()).unwrap().replace("segbench-checkpoint", "segbench-checkpoinX");
            [&good[..8], h.as_bytes(), &good[8 + hlen..]].concat()
        }),
        ("config hash", {
            let h = String::from_utf8(good[8..8 + hlen].to_vec()).unwrap().replace("\"Linknet\"", "\"Unet\"");
            let h = h.as_bytes();
            [&(h.len() as u64).to_le_bytes()[..], h, &good[8 + hlen..]].concat()
        }),
    ];
    let dir = tempfile::tempdir().unwrap();
    for (what, bytes) in cases {
        assert!(checkpoint::decode(&bytes).is_err(), "{what} accepted");
        let p = dir.path().join(format!("{}.ckpt", what.replace(' ', "_")));
        fs::write(&p, bytes).unwrap();
        let msg = checkpoint::read(&p).unwrap_err().to_string();
        assert!(msg.contains(&*p.file_name().unwrap().to_string_lossy()), "{what}: {msg}");
    }
}

#[test]
fn checkpoint_shape_mismatch_on_restore_is_reported() {
    let (cfg, m) = trained_like_model();
    let mut params = m.snapshot();
    let (name, t) = params[0].clone();
    let s = t.shape();
    params[0] = (name.clone(), segbench_core::nn::Tensor4::zeros([s[0] + 1, s[1], s[2], s[3]]));
    let c = Container { model_config: Some(cfg.clone()), checkpoint: Checkpoint { epoch: 1, val_loss: 0.5, params } };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("shape.ckpt");
    checkpoint::write(&p, &c).unwrap();
    let msg = segbench::commands::load_model(&p, (32, 32)).err().expect("mismatch accepted").to_string();
    assert!(msg.contains("shape.ckpt") && msg.contains(&name), "{msg}");
}

fn f32_exact(ds: &segbench_core::dataio::Dataset) -> segbench_core::dataio::Dataset {
    let mut ds = ds.clone();
    for s in ds.train.iter_mut().chain(&mut ds.val).chain(&mut ds.test) {
        s.image = s.image.map(|v| v as f32 as f64);
    }
    ds
}

#[test]
fn dataset_round_trips_through_manifest() {
    let ds = generate_synthetic(&SyntheticSpec { n_slices: 10, shape: (16, 24), seed: 5, balanced: false }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &ds).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back, f32_exact(&ds));
    assert_eq!(dataset_digest(&back), dataset_digest(&load_dataset(&manifest).unwrap()));
}

fn first_file(dir: &Path, suffix: &str) -> std::path::PathBuf {
    let train = dir.join("train");
    let mut names: Vec<_> = fs::read_dir(&train).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    names.into_iter().find(|p| p.to_string_lossy().ends_with(suffix)).unwrap()
}

#[test]
fn dataset_errors_name_the_offending_file() {
    let ds = generate_synthetic(&SyntheticSpec { n_slices: 6, shape: (8, 8), seed: 1, balanced: true }).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &ds).unwrap();
    let mask = first_file(dir.path(), "_mask.segb");
    fs::write(&mask, segb::encode(&Raster::U8(Grid::filled(8, 9, 0)))).unwrap();
    let msg = load_dataset(&manifest).unwrap_err().to_string();
    assert!(msg.contains(&*mask.file_name().unwrap().to_string_lossy()), "{msg}");

    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &ds).unwrap();
    let image = first_file(dir.path(), "_image.segb");
    let mut bytes = fs::read(&image).unwrap();
    bytes[0] = 0;
    fs::write(&image, bytes).unwrap();
    let msg = load_dataset(&manifest).unwrap_err().to_string();
    assert!(msg.contains(&*image.file_name().unwrap().to_string_lossy()), "{msg}");

    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &ds).unwrap();
    fs::remove_file(first_file(dir.path(), "_lung.segb")).unwrap();
    assert!(load_dataset(&manifest).is_err());
}
