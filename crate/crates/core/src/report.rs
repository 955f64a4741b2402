//! Analysis artifacts: intensity histograms, Dice-vs-size correlation, the
//! key/value results table, weight-grid images and stacked prediction volumes.
//!
//! Everything returns plain data or bytes; writing files is the caller's job.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataio::{ExperimentKind, Slice};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::metrics::{mean_std, MetricsRecord};
use crate::models::Architecture;
use crate::nn::{ParamKind, ParamStore};
use crate::real::Real;

pub const DEFAULT_HISTOGRAM_BINS: usize = 100;
pub const DEFAULT_WEIGHT_CLIP: (f64, f64) = (-0.4, 0.4);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistogramSource {
    Images,
    Masks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub frequencies: Vec<f64>,
    pub source: HistogramSource,
}

impl Histogram {
    /// `lo,hi,frequency` rows under a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,frequency\n");
        for (i, f) in self.frequencies.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.bin_edges[i], self.bin_edges[i + 1], f));
        }
        out
    }
}

/// Pooled, normalized histogram of pixel values over `[lo, hi]`; the range
/// defaults to the observed minimum and maximum. The top edge belongs to the last bin.
pub fn compute_histogram(
    slices: &[Slice],
    source: HistogramSource,
    n_bins: usize,
    range: Option<(f64, f64)>,
) -> Result<Histogram> {
    if slices.is_empty() {
        return Err(Error::EmptyInput("histogram over no slices".into()));
    }
    if n_bins == 0 {
        return Err(Error::InvalidParameter("histogram needs at least one bin".into()));
    }
    let values = || -> alloc::boxed::Box<dyn Iterator<Item = f64> + '_> {
        match source {
            HistogramSource::Images => alloc::boxed::Box::new(slices.iter().flat_map(|s| s.image.as_slice().iter().copied())),
            HistogramSource::Masks => {
                alloc::boxed::Box::new(slices.iter().flat_map(|s| s.target_mask.as_slice().iter().map(|&v| f64::from(v))))
            }
        }
    };
    let (lo, mut hi) = match range {
        Some(r) => r,
        None => values().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v))),
    };
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::InvalidParameter(format!("histogram range [{lo}, {hi}]")));
    }
    if hi == lo {
        hi = lo + 1.0;
    }
    let width = hi - lo;
    let mut counts = vec![0u64; n_bins];
    let mut total = 0u64;
    for v in values() {
        if !(lo..=hi).contains(&v) {
            continue;
        }
        let t = (v - lo) / width;
        let bin = (libm::floor(t * n_bins as f64) as usize).min(n_bins - 1);
        counts[bin] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::EmptyInput(format!("no pixel values fall in [{lo}, {hi}]")));
    }
    Ok(Histogram {
        bin_edges: (0..=n_bins).map(|i| lo + width * i as f64 / n_bins as f64).collect(),
        frequencies: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        source,
    })
}

/// Pearson correlation; errors when either coordinate has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidParameter(format!("pearson needs two equal series of length >= 2, got {} and {}", xs.len(), ys.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(format!("zero variance (sxx = {sxx}, syy = {syy})")));
    }
    Ok(sxy / libm::sqrt(sxx * syy))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceParams {
    /// `(params_millions, dice)` per ok record, in record order.
    pub points: Vec<(f64, f64)>,
    pub pearson_r: f64,
    pub n: usize,
}

impl DiceParams {
    pub fn scatter_csv(&self) -> String {
        let mut out = String::from("params_millions,dice\n");
        for (p, d) in &self.points {
            out.push_str(&format!("{p},{d}\n"));
        }
        out
    }
}

pub fn dice_vs_params(records: &[MetricsRecord]) -> Result<DiceParams> {
    let points: Vec<(f64, f64)> = records.iter().filter(|r| r.is_ok()).map(|r| (r.params_millions, r.dice)).collect();
    if points.len() < 3 {
        return Err(Error::EmptyInput(format!("correlation needs at least 3 ok records, got {}", points.len())));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
    Ok(DiceParams { pearson_r: pearson(&xs, &ys)?, n: points.len(), points })
}

fn init_slug(label: &str) -> String {
    label.to_ascii_lowercase()
}

fn push_stats(out: &mut Vec<(String, String)>, prefix: &str, dice: &[f64]) -> Result<()> {
    let ms = mean_std(dice)?;
    let max = dice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.push((format!("{prefix}-mean"), ms.mean.to_string()));
    out.push((format!("{prefix}-std"), ms.std.to_string()));
    out.push((format!("{prefix}-max"), max.to_string()));
    Ok(())
}

/// Dice summary keys over the ok records, in a fixed order: per experiment and
/// init, `<experiment>-<init>-{mean,std,max}`, then the same per architecture
/// `<experiment>-<architecture>-<init>-…`, then the names of the best cell as
/// `<experiment>-architecture-<init>-index-max` and `…-encoder-…`.
pub fn keys_values(records: &[MetricsRecord]) -> Result<Vec<(String, String)>> {
    let ok: Vec<&MetricsRecord> = records.iter().filter(|r| r.is_ok()).collect();
    if ok.is_empty() {
        return Err(Error::EmptyInput("no ok records for keys-values".into()));
    }
    let mut inits: Vec<&str> = Vec::new();
    for r in &ok {
        if !inits.contains(&r.weight_init.as_str()) {
            inits.push(&r.weight_init);
        }
    }
    let mut out = Vec::new();
    for exp in ExperimentKind::ALL {
        for &init in &inits {
            let cell: Vec<&&MetricsRecord> = ok.iter().filter(|r| r.experiment == exp && r.weight_init == init).collect();
            if cell.is_empty() {
                continue;
            }
            let slug = init_slug(init);
            let dice: Vec<f64> = cell.iter().map(|r| r.dice).collect();
            push_stats(&mut out, &format!("{}-{slug}", exp.slug()), &dice)?;
            for arch in Architecture::ALL {
                let d: Vec<f64> = cell.iter().filter(|r| r.architecture == arch).map(|r| r.dice).collect();
                if !d.is_empty() {
                    push_stats(&mut out, &format!("{}-{}-{slug}", exp.slug(), arch.name().to_ascii_lowercase()), &d)?;
                }
            }
            // first record attaining the maximum
            let best = cell.iter().fold(cell[0], |b, r| if r.dice > b.dice { r } else { b });
            out.push((format!("{}-architecture-{slug}-index-max", exp.slug()), best.architecture.name().to_string()));
            out.push((format!("{}-encoder-{slug}-index-max", exp.slug()), best.encoder.name().to_string()));
        }
    }
    Ok(out)
}

/// Two columns, no header.
pub fn keys_values_csv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k},{v}\n")).collect()
}

/// Grayscale tile sheet of one convolution kernel, as binary PGM (P5).
///
/// Each output filter becomes a `kh x (cin * kw)` tile (input channels side by
/// side); tiles are laid out on a near-square grid with 1-pixel black gutters.
/// Values are clipped to `clip` and mapped linearly onto 0..=255.
pub fn weight_grid_pgm<T: Real>(store: &ParamStore<T>, layer: &str, clip: (f64, f64)) -> Result<Vec<u8>> {
    let (lo, hi) = clip;
    if !(lo < hi) {
        return Err(Error::InvalidParameter(format!("clip range ({lo}, {hi})")));
    }
    let weight_name = format!("{layer}.weight");
    let entry = store
        .get(layer)
        .or_else(|| store.get(&weight_name))
        .ok_or_else(|| Error::InvalidParameter(format!("no layer named {layer}")))?;
    if !matches!(entry.kind, ParamKind::Weight { .. }) {
        return Err(Error::InvalidParameter(format!("{} is not a convolution kernel", entry.name)));
    }
    let [cout, cin, kh, kw] = entry.value.shape();
    let (tile_h, tile_w) = (kh, cin * kw);
    let grid_cols = (1..=cout).find(|c| c * c >= cout).unwrap_or(1);
    let grid_rows = cout.div_ceil(grid_cols);
    let width = grid_cols * (tile_w + 1) + 1;
    let height = grid_rows * (tile_h + 1) + 1;
    let mut px = vec![0u8; width * height];
    let to_byte = |v: f64| libm::round((v.clamp(lo, hi) - lo) / (hi - lo) * 255.0) as u8;
    for o in 0..cout {
        let (gr, gc) = (o / grid_cols, o % grid_cols);
        let (y0, x0) = (1 + gr * (tile_h + 1), 1 + gc * (tile_w + 1));
        for c in 0..cin {
            for i in 0..kh {
                for j in 0..kw {
                    px[(y0 + i) * width + x0 + c * kw + j] = to_byte(entry.value.at(o, c, i, j).to_f64());
                }
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

/// Binary voxel grid, `depth` slabs of `rows x cols`, slab-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Volume {
    pub depth: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl Volume {
    pub fn new(depth: usize, rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if depth == 0 || rows == 0 || cols == 0 || data.len() != depth * rows * cols {
            return Err(Error::Shape(format!("{} voxels for {depth}x{rows}x{cols}", data.len())));
        }
        Ok(Self { depth, rows, cols, data })
    }

    pub fn slab(&self, z: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.data[z * n..(z + 1) * n]
    }
}

/// Stacks masks given as `(slice_index, mask)` in increasing, gap-free index order.
pub fn stack_volume(masks: &[(u32, Grid<u8>)]) -> Result<Volume> {
    let Some((first, m0)) = masks.first() else {
        return Err(Error::EmptyInput("no masks to stack".into()));
    };
    let (rows, cols) = m0.shape();
    let mut data = Vec::with_capacity(masks.len() * rows * cols);
    for (k, (idx, m)) in masks.iter().enumerate() {
        if *idx != first + k as u32 {
            return Err(Error::Validation(format!("slice index {idx} at position {k}; expected {}", first + k as u32)));
        }
        if m.shape() != (rows, cols) {
            return Err(Error::Shape(format!("slice {idx} is {:?}, expected {:?}", m.shape(), (rows, cols))));
        }
        if !m.is_binary() {
            return Err(Error::Validation(format!("slice {idx} is not binary")));
        }
        data.extend_from_slice(m.as_slice());
    }
    Volume::new(masks.len(), rows, cols, data)
}
