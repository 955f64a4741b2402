//! Slices, datasets, and the preprocessing chain applied before training:
//! intensity normalization, label merging, resampling, lung gating and
//! per-experiment target selection. Also a synthetic CT-like generator.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::RngStream;

/// Smallest admissible slice side.
pub const MIN_SIDE: usize = 8;

/// Default intensity normalization in Hounsfield units.
pub const DEFAULT_MU: f64 = -500.0;
pub const DEFAULT_SIGMA: f64 = 500.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    LungSegmentation,
    LesionSegmentationA,
    LesionSegmentationB,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 3] = [
        ExperimentKind::LungSegmentation,
        ExperimentKind::LesionSegmentationA,
        ExperimentKind::LesionSegmentationB,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            ExperimentKind::LungSegmentation => "lung-segmentation",
            ExperimentKind::LesionSegmentationA => "lesion-segmentation-a",
            ExperimentKind::LesionSegmentationB => "lesion-segmentation-b",
        }
    }

    pub fn requires_lung_mask(self) -> bool {
        !matches!(self, ExperimentKind::LesionSegmentationA)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|e| e.slug() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub image: Grid<f64>,
    pub target_mask: Grid<u8>,
    pub lung_mask: Option<Grid<u8>>,
    pub volume_id: String,
    pub slice_index: u32,
}

impl Slice {
    pub fn key(&self) -> (&str, u32) {
        (&self.volume_id, self.slice_index)
    }

    pub fn label(&self) -> String {
        format!("{}#{}", self.volume_id, self.slice_index)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.image.shape()
    }

    pub fn validate(&self) -> Result<()> {
        let (r, c) = self.image.shape();
        if r < MIN_SIDE || c < MIN_SIDE {
            return Err(Error::Validation(format!(
                "slice {}: shape {r}x{c} below minimum {MIN_SIDE}x{MIN_SIDE}",
                self.label()
            )));
        }
        if !self.image.same_shape(&self.target_mask) {
            return Err(Error::Shape(format!(
                "slice {}: image {:?} vs target mask {:?}",
                self.label(),
                self.image.shape(),
                self.target_mask.shape()
            )));
        }
        if !self.target_mask.is_binary() {
            return Err(Error::Validation(format!("slice {}: target mask is not binary", self.label())));
        }
        if let Some(lung) = &self.lung_mask {
            if !self.image.same_shape(lung) {
                return Err(Error::Shape(format!(
                    "slice {}: image {:?} vs lung mask {:?}",
                    self.label(),
                    self.image.shape(),
                    lung.shape()
                )));
            }
            if !lung.is_binary() {
                return Err(Error::Validation(format!("slice {}: lung mask is not binary", self.label())));
            }
        }
        Ok(())
    }

    /// Image bilinearly, masks nearest-neighbour.
    pub fn resized(&self, rows: usize, cols: usize) -> Result<Slice> {
        Ok(Slice {
            image: resize(&self.image, (rows, cols), ResizeMode::Bilinear)?,
            target_mask: resize_nearest(&self.target_mask, (rows, cols))?,
            lung_mask: self.lung_mask.as_ref().map(|m| resize_nearest(m, (rows, cols))).transpose()?,
            volume_id: self.volume_id.clone(),
            slice_index: self.slice_index,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mu: DEFAULT_MU, sigma: DEFAULT_SIGMA }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub normalization: Normalization,
    pub train: Vec<Slice>,
    pub val: Vec<Slice>,
    pub test: Vec<Slice>,
}

impl Dataset {
    pub fn split(&self, which: SplitName) -> &[Slice] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// Checks every slice, split shapes, non-empty train/val and split disjointness.
    pub fn validate(&self) -> Result<()> {
        for which in [SplitName::Train, SplitName::Val] {
            if self.split(which).is_empty() {
                return Err(Error::EmptySplit(which.as_str().to_string()));
            }
        }
        if self.normalization.sigma <= 0.0 {
            return Err(Error::InvalidParameter(format!("normalization sigma {} <= 0", self.normalization.sigma)));
        }
        let mut seen: BTreeSet<(String, u32)> = BTreeSet::new();
        for which in [SplitName::Train, SplitName::Val, SplitName::Test] {
            let slices = self.split(which);
            let shape = slices.first().map(Slice::shape);
            for s in slices {
                s.validate()?;
                if Some(s.shape()) != shape {
                    return Err(Error::Shape(format!(
                        "split {}: slice {} has shape {:?}, expected {:?}",
                        which.as_str(),
                        s.label(),
                        s.shape(),
                        shape.unwrap_or_default()
                    )));
                }
                if !seen.insert((s.volume_id.clone(), s.slice_index)) {
                    return Err(Error::Validation(format!(
                        "slice {} appears in more than one split entry",
                        s.label()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Applies the dataset's own normalization to every image.
    pub fn normalized(&self) -> Result<Dataset> {
        let Normalization { mu, sigma } = self.normalization;
        let apply = |v: &[Slice]| v.iter().map(|s| normalize(s, mu, sigma)).collect::<Result<Vec<_>>>();
        Ok(Dataset {
            name: self.name.clone(),
            normalization: self.normalization,
            train: apply(&self.train)?,
            val: apply(&self.val)?,
            test: apply(&self.test)?,
        })
    }

    pub fn resized(&self, rows: usize, cols: usize) -> Result<Dataset> {
        let apply = |v: &[Slice]| v.iter().map(|s| s.resized(rows, cols)).collect::<Result<Vec<_>>>();
        Ok(Dataset {
            name: self.name.clone(),
            normalization: self.normalization,
            train: apply(&self.train)?,
            val: apply(&self.val)?,
            test: apply(&self.test)?,
        })
    }

    pub fn slice_shape(&self) -> Option<(usize, usize)> {
        self.train.first().map(Slice::shape)
    }

    pub fn all_slices(&self) -> impl Iterator<Item = &Slice> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    /// Whether every slice can serve the given experiment.
    pub fn supports(&self, experiment: ExperimentKind) -> bool {
        !experiment.requires_lung_mask() || self.all_slices().all(|s| s.lung_mask.is_some())
    }
}

/// `(x - mu) / sigma` on the image; masks and metadata pass through.
pub fn normalize(slice: &Slice, mu: f64, sigma: f64) -> Result<Slice> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be > 0, got {sigma}")));
    }
    let mut out = slice.clone();
    for v in out.image.as_mut_slice() {
        *v = (*v - mu) / sigma;
    }
    Ok(out)
}

/// Collapses a multi-label annotation into foreground/background.
pub fn merge_positive_classes(mask: &Grid<u32>) -> Grid<u8> {
    mask.map(|v| u8::from(v > 0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

fn check_target((rows, cols): (usize, usize)) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidParameter(format!("resize target must be >= 1x1, got {rows}x{cols}")));
    }
    Ok(())
}

/// Half-pixel-centre source coordinate of output index `dst`.
#[inline]
fn source_coord(dst: usize, in_len: usize, out_len: usize) -> f64 {
    (dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5
}

#[inline]
fn nearest_index(dst: usize, in_len: usize, out_len: usize) -> usize {
    let src = libm::floor((dst as f64 + 0.5) * in_len as f64 / out_len as f64) as usize;
    src.min(in_len - 1)
}

pub fn resize_nearest<T: Copy>(grid: &Grid<T>, target: (usize, usize)) -> Result<Grid<T>> {
    check_target(target)?;
    let (ir, ic) = grid.shape();
    Ok(Grid::from_fn(target.0, target.1, |r, c| {
        grid.get(nearest_index(r, ir, target.0), nearest_index(c, ic, target.1))
    }))
}

pub fn resize(image: &Grid<f64>, target: (usize, usize), mode: ResizeMode) -> Result<Grid<f64>> {
    check_target(target)?;
    if mode == ResizeMode::Nearest {
        return resize_nearest(image, target);
    }
    let (ir, ic) = image.shape();
    let axis = |dst: usize, in_len: usize, out_len: usize| {
        let s = source_coord(dst, in_len, out_len).clamp(0.0, (in_len - 1) as f64);
        let i0 = libm::floor(s) as usize;
        let i1 = (i0 + 1).min(in_len - 1);
        (i0, i1, s - i0 as f64)
    };
    Ok(Grid::from_fn(target.0, target.1, |r, c| {
        let (r0, r1, fr) = axis(r, ir, target.0);
        let (c0, c1, fc) = axis(c, ic, target.1);
        let top = image.get(r0, c0) * (1.0 - fc) + image.get(r0, c1) * fc;
        let bottom = image.get(r1, c0) * (1.0 - fc) + image.get(r1, c1) * fc;
        top * (1.0 - fr) + bottom * fr
    }))
}

/// Zeroes the image outside the lung mask.
pub fn apply_lung_gate(slice: &Slice) -> Result<Slice> {
    let lung = slice
        .lung_mask
        .as_ref()
        .ok_or_else(|| Error::Config(format!("slice {} has no lung mask to gate with", slice.label())))?;
    if !lung.same_shape(&slice.image) {
        return Err(Error::Shape(format!("slice {}: lung mask shape differs from image", slice.label())));
    }
    let mut out = slice.clone();
    for (v, &m) in out.image.as_mut_slice().iter_mut().zip(lung.as_slice()) {
        *v *= f64::from(m);
    }
    Ok(out)
}

/// Network input and training target for one experiment. Both are fresh copies.
pub fn select_target(slice: &Slice, experiment: ExperimentKind) -> Result<(Grid<f64>, Grid<u8>)> {
    match experiment {
        ExperimentKind::LungSegmentation => {
            let lung = slice.lung_mask.as_ref().ok_or_else(|| {
                Error::Config(format!("slice {}: lung segmentation needs a lung mask", slice.label()))
            })?;
            Ok((slice.image.clone(), lung.clone()))
        }
        ExperimentKind::LesionSegmentationA => Ok((slice.image.clone(), slice.target_mask.clone())),
        ExperimentKind::LesionSegmentationB => {
            let gated = apply_lung_gate(slice)?;
            Ok((gated.image, gated.target_mask))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_slices: usize,
    pub shape: (usize, usize),
    pub seed: u64,
    pub balanced: bool,
}

/// Number of slices per `(train, val, test)`.
///
/// A tenth (at least one) is held out as test; the rest is split 80/20 with at
/// least one slice on each side.
pub fn split_counts(n: usize) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(Error::InvalidParameter(format!("need at least 3 slices (one per split), got {n}")));
    }
    let test = n.div_ceil(10).max(1);
    let rest = n - test;
    let val = (libm::round(rest as f64 * 0.2) as usize).clamp(1, rest - 1);
    Ok((rest - val, val, test))
}

const SLICES_PER_VOLUME: usize = 4;

/// Deterministic CT-like phantoms: a body disc at soft-tissue density holding two
/// air-filled lung ellipses, with denser ground-glass blobs restricted to the lungs.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let (rows, cols) = spec.shape;
    if rows < MIN_SIDE || cols < MIN_SIDE {
        return Err(Error::InvalidParameter(format!("synthetic shape {rows}x{cols} below {MIN_SIDE}x{MIN_SIDE}")));
    }
    let (n_train, n_val, n_test) = split_counts(spec.n_slices)?;
    let root = RngStream::new(spec.seed);
    let make_split = |name: &str, count: usize, tag: u64| {
        (0..count)
            .map(|i| {
                let volume = i / SLICES_PER_VOLUME;
                let index = (i % SLICES_PER_VOLUME) as u32;
                let mut volume_rng = root.split(tag).split(volume as u64);
                let anatomy = Anatomy::sample(&mut volume_rng);
                let mut slice_rng = root.split(tag).split(volume as u64).split(1 + u64::from(index));
                phantom_slice(
                    &anatomy,
                    index,
                    spec,
                    &mut slice_rng,
                    format!("synthetic-{name}-{volume:03}"),
                )
            })
            .collect::<Vec<_>>()
    };
    let dataset = Dataset {
        name: format!("synthetic-{}", spec.seed),
        normalization: Normalization::default(),
        train: make_split("train", n_train, 0),
        val: make_split("val", n_val, 1),
        test: make_split("test", n_test, 2),
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Per-volume geometry in unit coordinates.
struct Anatomy {
    body_radius: (f64, f64),
    lung_offset: f64,
    lung_radius: (f64, f64),
    lung_centre_row: f64,
}

impl Anatomy {
    fn sample(rng: &mut RngStream) -> Self {
        Self {
            body_radius: (rng.uniform(0.40, 0.46), rng.uniform(0.44, 0.48)),
            lung_offset: rng.uniform(0.17, 0.21),
            lung_radius: (rng.uniform(0.26, 0.32), rng.uniform(0.13, 0.16)),
            lung_centre_row: rng.uniform(0.46, 0.54),
        }
    }
}

#[inline]
fn inside_ellipse(y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64) -> bool {
    let dy = (y - cy) / ry;
    let dx = (x - cx) / rx;
    dy * dy + dx * dx <= 1.0
}

fn phantom_slice(anatomy: &Anatomy, index: u32, spec: &SyntheticSpec, rng: &mut RngStream, volume_id: String) -> Slice {
    let (rows, cols) = spec.shape;
    // lungs shrink towards the ends of a volume
    let taper = 1.0 - 0.08 * f64::from(index);
    let (lry, lrx) = (anatomy.lung_radius.0 * taper, anatomy.lung_radius.1 * taper);
    let lungs = [(anatomy.lung_centre_row, 0.5 - anatomy.lung_offset), (anatomy.lung_centre_row, 0.5 + anatomy.lung_offset)];

    let n_blobs = if rng.bernoulli(0.8) { 1 + rng.below(2) } else { 0 };
    let blob_scale = if spec.balanced { (0.45, 0.8) } else { (0.15, 0.35) };
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let (cy, cx) = lungs[rng.below(2)];
            let ry = lry * rng.uniform(blob_scale.0, blob_scale.1);
            let rx = lrx * rng.uniform(blob_scale.0, blob_scale.1);
            let oy = cy + rng.uniform(-0.5, 0.5) * (lry - ry).max(0.0);
            let ox = cx + rng.uniform(-0.5, 0.5) * (lrx - rx).max(0.0);
            (oy, ox, ry, rx)
        })
        .collect();

    let mut image = Grid::filled(rows, cols, -1000.0);
    let mut lung_mask = Grid::filled(rows, cols, 0u8);
    let mut lesion_mask = Grid::filled(rows, cols, 0u8);
    for r in 0..rows {
        for c in 0..cols {
            let y = (r as f64 + 0.5) / rows as f64;
            let x = (c as f64 + 0.5) / cols as f64;
            let mut hu = -1000.0;
            if inside_ellipse(y, x, 0.5, 0.5, anatomy.body_radius.0, anatomy.body_radius.1) {
                hu = 40.0;
                if lungs.iter().any(|&(cy, cx)| inside_ellipse(y, x, cy, cx, lry, lrx)) {
                    lung_mask.set(r, c, 1);
                    hu = -850.0;
                    if blobs.iter().any(|&(cy, cx, ry, rx)| inside_ellipse(y, x, cy, cx, ry, rx)) {
                        lesion_mask.set(r, c, 1);
                        hu = -350.0;
                    }
                }
            }
            // integer HU survive the f32 on-disk representation exactly
            image.set(r, c, libm::round(hu + 25.0 * rng.normal()));
        }
    }
    Slice { image, target_mask: lesion_mask, lung_mask: Some(lung_mask), volume_id, slice_index: index }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn random_slice(seed: u64, rows: usize, cols: usize) -> Slice {
        let mut rng = RngStream::new(seed);
        Slice {
            image: Grid::from_fn(rows, cols, |_, _| rng.uniform(-1200.0, 400.0)),
            target_mask: Grid::from_fn(rows, cols, |_, _| u8::from(rng.bernoulli(0.2))),
            lung_mask: Some(Grid::from_fn(rows, cols, |_, _| u8::from(rng.bernoulli(0.6)))),
            volume_id: "v".into(),
            slice_index: 0,
        }
    }

    #[test]
    fn normalize_fixed_points() {
        let mut s = random_slice(1, 8, 8);
        s.image.set(0, 0, -500.0);
        s.image.set(0, 1, -1000.0);
        let n = normalize(&s, -500.0, 500.0).unwrap();
        assert_eq!(n.image.get(0, 0), 0.0);
        assert_eq!(n.image.get(0, 1), -1.0);
        assert_eq!(n.target_mask, s.target_mask);
        assert_eq!(n.lung_mask, s.lung_mask);
    }

    #[test]
    fn normalize_matches_scalar_loop() {
        let s = random_slice(2, 8, 8);
        let n = normalize(&s, -500.0, 500.0).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let want = (s.image.get(r, c) + 500.0) / 500.0;
                assert!((n.image.get(r, c) - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn normalize_rejects_bad_sigma() {
        let s = random_slice(3, 8, 8);
        assert!(matches!(normalize(&s, 0.0, 0.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(normalize(&s, 0.0, -1.0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn merge_classes() {
        let m = Grid::new(2, 2, vec![0u32, 1, 2, 3]).unwrap();
        assert_eq!(merge_positive_classes(&m).into_vec(), vec![0, 1, 1, 1]);
        let z = Grid::filled(4, 4, 0u32);
        assert_eq!(merge_positive_classes(&z).count_ones(), 0);
        let mut single = Grid::filled(4, 4, 0u32);
        single.set(2, 1, 3);
        let merged = merge_positive_classes(&single);
        assert_eq!(merged.count_ones(), 1);
        assert_eq!(merged.get(2, 1), 1);
        // idempotent
        let again = merge_positive_classes(&merged.map(u32::from));
        assert_eq!(again, merged);
    }

    #[test]
    fn resize_identity_and_constants() {
        let s = random_slice(4, 8, 8);
        for mode in [ResizeMode::Bilinear, ResizeMode::Nearest] {
            assert_eq!(resize(&s.image, (8, 8), mode).unwrap(), s.image);
            let c = Grid::filled(5, 7, 3.25);
            let out = resize(&c, (13, 4), mode).unwrap();
            assert_eq!(out.shape(), (13, 4));
            assert!(out.as_slice().iter().all(|&v| (v - 3.25).abs() < 1e-12));
        }
        assert!(resize(&s.image, (0, 4), ResizeMode::Bilinear).is_err());
    }

    #[test]
    fn nearest_keeps_mask_binary() {
        let s = random_slice(5, 16, 16);
        let up = resize_nearest(&s.target_mask, (32, 32)).unwrap();
        assert!(up.is_binary());
        assert_eq!(up.count_ones(), 4 * s.target_mask.count_ones());
    }

    #[test]
    fn lung_gate() {
        let mut s = random_slice(6, 8, 8);
        s.lung_mask = Some(Grid::filled(8, 8, 1));
        assert_eq!(apply_lung_gate(&s).unwrap().image, s.image);
        s.lung_mask = Some(Grid::filled(8, 8, 0));
        assert!(apply_lung_gate(&s).unwrap().image.as_slice().iter().all(|&v| v == 0.0));
        let s = random_slice(7, 8, 8);
        let gated = apply_lung_gate(&s).unwrap();
        let lung = s.lung_mask.as_ref().unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(gated.image.get(r, c), s.image.get(r, c) * f64::from(lung.get(r, c)));
            }
        }
        assert_eq!(gated.target_mask, s.target_mask);
        let mut bare = s.clone();
        bare.lung_mask = None;
        let err = apply_lung_gate(&bare).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("v#0")));
    }

    #[test]
    fn target_selection() {
        let s = random_slice(8, 8, 8);
        let (x, y) = select_target(&s, ExperimentKind::LungSegmentation).unwrap();
        assert_eq!(&y, s.lung_mask.as_ref().unwrap());
        assert_eq!(x, s.image);
        let (xa, ya) = select_target(&s, ExperimentKind::LesionSegmentationA).unwrap();
        let (xb, yb) = select_target(&s, ExperimentKind::LesionSegmentationB).unwrap();
        assert_eq!(ya, yb);
        assert_eq!(xa, s.image);
        assert_eq!(xb, apply_lung_gate(&s).unwrap().image);

        let mut xm = xa;
        xm.set(0, 0, 12345.0);
        assert_ne!(s.image.get(0, 0), 12345.0);

        let mut bare = s.clone();
        bare.lung_mask = None;
        assert!(select_target(&bare, ExperimentKind::LungSegmentation).is_err());
        assert!(select_target(&bare, ExperimentKind::LesionSegmentationB).is_err());
        assert!(select_target(&bare, ExperimentKind::LesionSegmentationA).is_ok());
    }

    #[test]
    fn slice_validation() {
        let mut s = random_slice(9, 8, 8);
        s.validate().unwrap();
        s.target_mask.set(0, 0, 7);
        assert!(matches!(s.validate(), Err(Error::Validation(_))));
        let small = random_slice(9, 4, 8);
        assert!(small.validate().is_err());
        let mut bad = random_slice(9, 8, 8);
        bad.lung_mask = Some(Grid::filled(8, 9, 0));
        assert!(matches!(bad.validate(), Err(Error::Shape(_))));
    }

    #[test]
    fn split_sizes() {
        assert_eq!(split_counts(3).unwrap(), (1, 1, 1));
        assert_eq!(split_counts(12).unwrap(), (8, 2, 2));
        assert_eq!(split_counts(100).unwrap(), (72, 18, 10));
        assert!(split_counts(2).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_valid() {
        let spec = SyntheticSpec { n_slices: 12, shape: (32, 32), seed: 7, balanced: false };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (8, 2, 2));
        for s in a.all_slices() {
            s.validate().unwrap();
            let lung = s.lung_mask.as_ref().unwrap();
            for (&t, &l) in s.target_mask.as_slice().iter().zip(lung.as_slice()) {
                assert!(t <= l, "lesion outside lung");
            }
            assert!(s.image.as_slice().iter().all(|&v| v == (v as f32) as f64));
        }
        let other = generate_synthetic(&SyntheticSpec { seed: 8, ..spec.clone() }).unwrap();
        assert_ne!(a, other);
        assert!(generate_synthetic(&SyntheticSpec { n_slices: 2, ..spec }).is_err());
    }

    #[test]
    fn synthetic_class_balance() {
        let coverage = |balanced| {
            let d = generate_synthetic(&SyntheticSpec { n_slices: 40, shape: (64, 64), seed: 3, balanced }).unwrap();
            let total: usize = d.all_slices().map(|s| s.target_mask.count_ones()).sum();
            let lung: usize = d.all_slices().map(|s| s.lung_mask.as_ref().unwrap().count_ones()).sum();
            let px = 40.0 * 64.0 * 64.0;
            (total as f64 / px, lung as f64 / px)
        };
        let (lesion, lung) = coverage(false);
        assert!(lesion < 0.10, "unbalanced lesion coverage {lesion}");
        assert!(lesion > 0.0);
        assert!(lung > 0.15, "lung coverage {lung}");
        let (lesion_b, _) = coverage(true);
        assert!(lesion_b > lesion);
    }
}
