//! Paired image/mask augmentation: random flips, rotation and scaling applied
//! as one affine resampling pass with zero padding.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::dataio::ResizeMode;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::rng::RngStream;

pub const FLIP_PROBABILITY: f64 = 0.5;
pub const ANGLE_RANGE: (f64, f64) = (-180.0, 180.0);
pub const SCALE_RANGE: (f64, f64) = (0.5, 1.5);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    /// Degrees, counter-clockwise.
    pub angle: f64,
    pub scale: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { hflip: false, vflip: false, angle: 0.0, scale: 1.0 };

    pub fn validate(&self) -> Result<()> {
        if !(ANGLE_RANGE.0..=ANGLE_RANGE.1).contains(&self.angle) {
            return Err(Error::InvalidParameter(format!("angle {} outside [-180, 180]", self.angle)));
        }
        if !(SCALE_RANGE.0..=SCALE_RANGE.1).contains(&self.scale) {
            return Err(Error::InvalidParameter(format!("scale {} outside [0.5, 1.5]", self.scale)));
        }
        Ok(())
    }
}

/// Draws flips, then angle, then scale from the stream.
pub fn sample_params(rng: &mut RngStream) -> AugmentParams {
    let hflip = rng.bernoulli(FLIP_PROBABILITY);
    let vflip = rng.bernoulli(FLIP_PROBABILITY);
    let angle = rng.uniform(ANGLE_RANGE.0, ANGLE_RANGE.1);
    let scale = rng.uniform(SCALE_RANGE.0, SCALE_RANGE.1);
    AugmentParams { hflip, vflip, angle, scale }
}

/// Output-to-source map in centred pixel coordinates.
///
/// Forward order is flip, rotate about the centre, scale about the centre; this is
/// the inverse of that composition.
#[derive(Clone, Copy, Debug)]
struct InverseMap {
    m: [[f64; 2]; 2],
    centre: (f64, f64),
}

impl InverseMap {
    fn new(p: &AugmentParams, rows: usize, cols: usize) -> Self {
        let theta = p.angle.to_radians();
        let (sin, cos) = (libm::sin(theta), libm::cos(theta));
        // inverse rotation applied to (y, x) with y pointing down
        let inv_s = 1.0 / p.scale;
        let fy = if p.vflip { -1.0 } else { 1.0 };
        let fx = if p.hflip { -1.0 } else { 1.0 };
        let m = [
            [fy * cos * inv_s, fy * -sin * inv_s],
            [fx * sin * inv_s, fx * cos * inv_s],
        ];
        Self { m, centre: (rows as f64 / 2.0, cols as f64 / 2.0) }
    }

    /// Continuous source index (row, col) for output pixel (r, c).
    #[inline]
    fn source(&self, r: usize, c: usize) -> (f64, f64) {
        let y = r as f64 + 0.5 - self.centre.0;
        let x = c as f64 + 0.5 - self.centre.1;
        let sy = self.m[0][0] * y + self.m[0][1] * x;
        let sx = self.m[1][0] * y + self.m[1][1] * x;
        (sy + self.centre.0 - 0.5, sx + self.centre.1 - 0.5)
    }
}

#[inline]
fn fetch(g: &Grid<f64>, r: isize, c: isize) -> f64 {
    if r < 0 || c < 0 || r >= g.rows() as isize || c >= g.cols() as isize {
        0.0
    } else {
        g.get(r as usize, c as usize)
    }
}

#[inline]
fn nearest_of(sr: f64, sc: f64, rows: usize, cols: usize) -> Option<(usize, usize)> {
    let r = libm::floor(sr + 0.5);
    let c = libm::floor(sc + 0.5);
    if r < 0.0 || c < 0.0 || r >= rows as f64 || c >= cols as f64 {
        None
    } else {
        Some((r as usize, c as usize))
    }
}

/// Resamples an image under `p`; out-of-frame samples are zero.
pub fn warp_image(image: &Grid<f64>, p: &AugmentParams, mode: ResizeMode) -> Grid<f64> {
    let (rows, cols) = image.shape();
    let map = InverseMap::new(p, rows, cols);
    Grid::from_fn(rows, cols, |r, c| {
        let (sr, sc) = map.source(r, c);
        match mode {
            ResizeMode::Nearest => nearest_of(sr, sc, rows, cols).map_or(0.0, |(i, j)| image.get(i, j)),
            ResizeMode::Bilinear => {
                let r0 = libm::floor(sr);
                let c0 = libm::floor(sc);
                let (fr, fc) = (sr - r0, sc - c0);
                let (r0, c0) = (r0 as isize, c0 as isize);
                let top = fetch(image, r0, c0) * (1.0 - fc) + fetch(image, r0, c0 + 1) * fc;
                let bottom = fetch(image, r0 + 1, c0) * (1.0 - fc) + fetch(image, r0 + 1, c0 + 1) * fc;
                top * (1.0 - fr) + bottom * fr
            }
        }
    })
}

pub fn warp_mask(mask: &Grid<u8>, p: &AugmentParams) -> Grid<u8> {
    let (rows, cols) = mask.shape();
    let map = InverseMap::new(p, rows, cols);
    Grid::from_fn(rows, cols, |r, c| {
        let (sr, sc) = map.source(r, c);
        nearest_of(sr, sc, rows, cols).map_or(0, |(i, j)| mask.get(i, j))
    })
}

/// Same geometric transform on both: bilinear for the image, nearest for the mask.
pub fn apply(image: &Grid<f64>, mask: &Grid<u8>, p: &AugmentParams) -> Result<(Grid<f64>, Grid<u8>)> {
    if !image.same_shape(mask) {
        return Err(Error::Shape(format!("image {:?} vs mask {:?}", image.shape(), mask.shape())));
    }
    p.validate()?;
    Ok((warp_image(image, p, ResizeMode::Bilinear), warp_mask(mask, p)))
}
