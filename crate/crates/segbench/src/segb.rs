//! SEGB raster files.
//!
//! ```text
//! "SEGB" | version u8 = 1 | dtype u8 (0 = f32, 1 = u8) | rows u32 LE | cols u32 LE | payload
//! ```
//!
//! The payload is row-major, little-endian. The 3D variant adds `depth u32 LE`
//! after `cols` and stores `depth` row-major slabs.

use std::path::Path;

use segbench_core::report::Volume;
use segbench_core::Grid;

use crate::error::{self, Error, Result};

pub const MAGIC: &[u8; 4] = b"SEGB";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U8: u8 = 1;
const HEADER_2D: usize = 14;
const HEADER_3D: usize = 18;

#[derive(Clone, Debug, PartialEq)]
pub enum Raster {
    F32(Grid<f32>),
    U8(Grid<u8>),
}

fn header(dtype: u8, dims: &[usize]) -> Result<Vec<u8>, String> {
    let mut out = Vec::with_capacity(HEADER_3D);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| format!("dimension {d} does not fit in u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn encode(raster: &Raster) -> Vec<u8> {
    match raster {
        Raster::F32(g) => {
            let mut out = header(DTYPE_F32, &[g.rows(), g.cols()]).expect("grid dims fit u32");
            for v in g.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out
        }
        Raster::U8(g) => {
            let mut out = header(DTYPE_U8, &[g.rows(), g.cols()]).expect("grid dims fit u32");
            out.extend_from_slice(g.as_slice());
            out
        }
    }
}

fn u32_at(bytes: &[u8], at: usize) -> usize {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
}

/// Parses magic, version and dtype; returns the dtype.
fn check_prefix(bytes: &[u8], header_len: usize) -> Result<u8, String> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err("bad magic: not a SEGB file".into());
    }
    if bytes.len() < header_len {
        return Err(format!("truncated header: {} bytes", bytes.len()));
    }
    if bytes[4] != VERSION {
        return Err(format!("unsupported version {} (expected {VERSION})", bytes[4]));
    }
    match bytes[5] {
        d @ (DTYPE_F32 | DTYPE_U8) => Ok(d),
        d => Err(format!("unknown dtype {d}")),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Raster, String> {
    let dtype = check_prefix(bytes, HEADER_2D)?;
    let (rows, cols) = (u32_at(bytes, 6), u32_at(bytes, 10));
    if rows == 0 || cols == 0 {
        return Err(format!("empty raster {rows}x{cols}"));
    }
    let n = rows.checked_mul(cols).ok_or("raster too large")?;
    let payload = &bytes[HEADER_2D..];
    let width = if dtype == DTYPE_F32 { 4 } else { 1 };
    if payload.len() != n * width {
        return Err(format!("shape {rows}x{cols} needs {} payload bytes, found {}", n * width, payload.len()));
    }
    let grid_err = |e: segbench_core::Error| e.to_string();
    Ok(match dtype {
        DTYPE_F32 => Raster::F32(
            Grid::new(rows, cols, payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
                .map_err(grid_err)?,
        ),
        _ => Raster::U8(Grid::new(rows, cols, payload.to_vec()).map_err(grid_err)?),
    })
}

pub fn read(path: &Path) -> Result<Raster> {
    decode(&error::read(path)?).map_err(|m| Error::format(path, m))
}

/// An f32 image, widened to f64.
pub fn read_image(path: &Path) -> Result<Grid<f64>> {
    match read(path)? {
        Raster::F32(g) => Ok(g.map(f64::from)),
        Raster::U8(_) => Err(Error::format(path, "expected an f32 image, found a u8 raster")),
    }
}

/// A u8 mask whose values must all be 0 or 1.
pub fn read_mask(path: &Path) -> Result<Grid<u8>> {
    match read(path)? {
        Raster::U8(g) => match g.as_slice().iter().find(|&&v| v > 1) {
            Some(v) => Err(Error::format(path, format!("mask value {v} is not binary"))),
            None => Ok(g),
        },
        Raster::F32(_) => Err(Error::format(path, "expected a u8 mask, found an f32 raster")),
    }
}

/// Stores an image as f32; values must be finite.
pub fn write_image(path: &Path, image: &Grid<f64>) -> Result<()> {
    if let Some(v) = image.as_slice().iter().find(|v| !v.is_finite()) {
        return Err(Error::format(path, format!("refusing to write non-finite pixel {v}")));
    }
    error::write(path, encode(&Raster::F32(image.map(|v| v as f32))))
}

pub fn write_mask(path: &Path, mask: &Grid<u8>) -> Result<()> {
    error::write(path, encode(&Raster::U8(mask.clone())))
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = header(DTYPE_U8, &[v.rows, v.cols, v.depth]).expect("volume dims fit u32");
    out.extend_from_slice(&v.data);
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume, String> {
    let dtype = check_prefix(bytes, HEADER_3D)?;
    if dtype != DTYPE_U8 {
        return Err("volumes must be u8".into());
    }
    let (rows, cols, depth) = (u32_at(bytes, 6), u32_at(bytes, 10), u32_at(bytes, 14));
    let payload = &bytes[HEADER_3D..];
    let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(depth)).ok_or("volume too large")?;
    if payload.len() != n {
        return Err(format!("shape {depth}x{rows}x{cols} needs {n} payload bytes, found {}", payload.len()));
    }
    Volume::new(depth, rows, cols, payload.to_vec()).map_err(|e| e.to_string())
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    error::write(path, encode_volume(v))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    decode_volume(&error::read(path)?).map_err(|m| Error::format(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let g = Grid::new(2, 3, vec![0u8, 1, 1, 0, 0, 1]).unwrap();
        let bytes = encode(&Raster::U8(g.clone()));
        assert_eq!(&bytes[..HEADER_2D], b"SEGB\x01\x01\x02\x00\x00\x00\x03\x00\x00\x00");
        assert_eq!(&bytes[HEADER_2D..], g.as_slice());
        let f = Grid::new(1, 1, vec![1.0f32]).unwrap();
        assert_eq!(encode(&Raster::F32(f)), b"SEGB\x01\x00\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x80\x3f");
    }

    #[test]
    fn decode_rejects_corruption() {
        let good = encode(&Raster::U8(Grid::filled(2, 2, 1)));
        assert!(decode(&good).is_ok());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().contains("magic"));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(decode(&bad).unwrap_err().contains("version"));
        let mut bad = good.clone();
        bad[6] = 3;
        assert!(decode(&bad).unwrap_err().contains("payload"));
        assert!(decode(&good[..10]).is_err());
    }
}
