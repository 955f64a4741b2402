//! Dataset manifests: a JSON index of SEGB slice files per split.
//!
//! ```json
//! {"name": "...", "normalization": {"mu": -500, "sigma": 500},
//!  "splits": {"train": [{"image": "a.segb", "target_mask": "b.segb",
//!                        "lung_mask": "c.segb", "volume_id": "v1", "slice_index": 0}],
//!             "val": [...], "test": [...]}}
//! ```
//!
//! Slice paths are relative to the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use segbench_core::dataio::{Dataset, Normalization, Slice, SplitName};

use crate::error::{self, Error, Result};
use crate::segb::{self, Raster};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceEntry {
    pub image: PathBuf,
    pub target_mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lung_mask: Option<PathBuf>,
    pub volume_id: String,
    pub slice_index: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    #[serde(default)]
    pub train: Vec<SliceEntry>,
    #[serde(default)]
    pub val: Vec<SliceEntry>,
    #[serde(default)]
    pub test: Vec<SliceEntry>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub splits: Splits,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_slice(&error::read(path)?).map_err(|source| Error::Json { path: path.into(), source })
    }
}

fn load_slice(dir: &Path, e: &SliceEntry) -> Result<Slice> {
    let image_path = dir.join(&e.image);
    let mask_path = dir.join(&e.target_mask);
    let image = segb::read_image(&image_path)?;
    let target_mask = segb::read_mask(&mask_path)?;
    if target_mask.shape() != image.shape() {
        return Err(Error::format(
            &mask_path,
            format!("mask shape {:?} differs from image {} shape {:?}", target_mask.shape(), image_path.display(), image.shape()),
        ));
    }
    let lung_mask = match &e.lung_mask {
        Some(p) => {
            let path = dir.join(p);
            let m = segb::read_mask(&path)?;
            if m.shape() != image.shape() {
                return Err(Error::format(&path, format!("lung mask shape {:?} differs from image shape {:?}", m.shape(), image.shape())));
            }
            Some(m)
        }
        None => None,
    };
    let slice = Slice { image, target_mask, lung_mask, volume_id: e.volume_id.clone(), slice_index: e.slice_index };
    slice.validate().map_err(|err| Error::in_file(&image_path, err))?;
    Ok(slice)
}

/// Reads and validates every slice the manifest lists, keeping split membership as given.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let m = Manifest::read(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let load = |entries: &[SliceEntry]| entries.iter().map(|e| load_slice(dir, e)).collect::<Result<Vec<_>>>();
    let ds = Dataset {
        name: m.name.clone(),
        normalization: m.normalization,
        train: load(&m.splits.train)?,
        val: load(&m.splits.val)?,
        test: load(&m.splits.test)?,
    };
    ds.validate().map_err(|e| Error::in_file(manifest_path, e))?;
    Ok(ds)
}

fn slice_stem(split: SplitName, s: &Slice) -> String {
    let safe: String = s.volume_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    format!("{}/{}_{:04}", split.as_str(), safe, s.slice_index)
}

/// Writes SEGB files for every slice plus `manifest.json` into `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<PathBuf> {
    let mut manifest = Manifest { name: ds.name.clone(), normalization: ds.normalization, splits: Splits::default() };
    for split in [SplitName::Train, SplitName::Val, SplitName::Test] {
        let mut entries = Vec::new();
        for s in ds.split(split) {
            let stem = slice_stem(split, s);
            let entry = SliceEntry {
                image: format!("{stem}_image.segb").into(),
                target_mask: format!("{stem}_mask.segb").into(),
                lung_mask: s.lung_mask.as_ref().map(|_| format!("{stem}_lung.segb").into()),
                volume_id: s.volume_id.clone(),
                slice_index: s.slice_index,
            };
            segb::write_image(&dir.join(&entry.image), &s.image)?;
            segb::write_mask(&dir.join(&entry.target_mask), &s.target_mask)?;
            if let (Some(p), Some(m)) = (&entry.lung_mask, &s.lung_mask) {
                segb::write_mask(&dir.join(p), m)?;
            }
            entries.push(entry);
        }
        match split {
            SplitName::Train => manifest.splits.train = entries,
            SplitName::Val => manifest.splits.val = entries,
            SplitName::Test => manifest.splits.test = entries,
        }
    }
    let path = dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    error::write(&path, json)?;
    Ok(path)
}

/// SHA-256 over the dataset content (names, ids, normalization and SEGB encodings
/// of every raster), independent of where the files live.
pub fn dataset_digest(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    h.update(ds.name.as_bytes());
    h.update([0]);
    h.update(ds.normalization.mu.to_le_bytes());
    h.update(ds.normalization.sigma.to_le_bytes());
    for split in [SplitName::Train, SplitName::Val, SplitName::Test] {
        h.update(split.as_str().as_bytes());
        h.update((ds.split(split).len() as u64).to_le_bytes());
        for s in ds.split(split) {
            h.update(s.volume_id.as_bytes());
            h.update([0]);
            h.update(s.slice_index.to_le_bytes());
            h.update(segb::encode(&Raster::F32(s.image.map(|v| v as f32))));
            h.update(segb::encode(&Raster::U8(s.target_mask.clone())));
            match &s.lung_mask {
                Some(m) => h.update(segb::encode(&Raster::U8(m.clone()))),
                None => h.update([0xff]),
            }
        }
    }
    hex::encode(h.finalize())
}

/// SHA-256 of a byte string, hex encoded.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
