//! Checkpoint container: a JSON header describing every tensor, then one blob of
//! little-endian f32 values in header order.
//!
//! ```text
//! header_len u64 LE | header JSON (header_len bytes) | blob
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use segbench_core::models::ModelConfig;
use segbench_core::nn::{load_named, ParamStore, Tensor4, WarmstartReport};
use segbench_core::training::Checkpoint;
use segbench_core::Real;

use crate::error::{self, Error, Result};
use crate::manifest::sha256_hex;

pub const FORMAT: &str = "segbench-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    /// Byte offset into the blob.
    pub offset: u64,
    /// Length in bytes.
    pub length: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    /// SHA-256 of the model config JSON; empty when there is none.
    pub config_hash: String,
    pub epoch: usize,
    pub val_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_config: Option<ModelConfig>,
    pub params: Vec<TensorEntry>,
}

/// A checkpoint with the model it belongs to, when known.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub model_config: Option<ModelConfig>,
    pub checkpoint: Checkpoint,
}

pub fn config_hash(config: &ModelConfig) -> String {
    sha256_hex(serde_json::to_string(config).expect("config serializes").as_bytes())
}

pub fn encode(c: &Container) -> Vec<u8> {
    let mut blob = Vec::new();
    let mut params = Vec::with_capacity(c.checkpoint.params.len());
    for (name, t) in &c.checkpoint.params {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        params.push(TensorEntry { name: name.clone(), shape: t.shape(), offset, length: blob.len() as u64 - offset });
    }
    let header = Header {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        config_hash: c.model_config.as_ref().map(config_hash).unwrap_or_default(),
        epoch: c.checkpoint.epoch,
        val_loss: c.checkpoint.val_loss,
        model_config: c.model_config.clone(),
        params,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Container, String> {
    if bytes.len() < 8 {
        return Err("truncated: no header length".into());
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let end = usize::try_from(len).ok().and_then(|l| l.checked_add(8)).filter(|&e| e <= bytes.len());
    let Some(end) = end else {
        return Err(format!("header length {len} exceeds file size {}", bytes.len()));
    };
    let header: Header = serde_json::from_slice(&bytes[8..end]).map_err(|e| format!("corrupt header: {e}"))?;
    if header.format != FORMAT || header.version != FORMAT_VERSION {
        return Err(format!("unsupported container {} v{}", header.format, header.version));
    }
    if let Some(cfg) = &header.model_config {
        if config_hash(cfg) != header.config_hash {
            return Err("config hash does not match the embedded model config".into());
        }
    }
    let blob = &bytes[end..];
    let mut expected = 0u64;
    let mut params = Vec::with_capacity(header.params.len());
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        if e.offset != expected || e.length != 4 * n as u64 {
            return Err(format!("tensor {} has inconsistent offset/length", e.name));
        }
        let (start, stop) = (e.offset as usize, (e.offset + e.length) as usize);
        if stop > blob.len() {
            return Err(format!("tensor {} runs past the end of the blob", e.name));
        }
        let data = blob[start..stop].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor4::from_vec(e.shape, data).map_err(|err| format!("tensor {}: {err}", e.name))?;
        params.push((e.name.clone(), t));
        expected += e.length;
    }
    if expected != blob.len() as u64 {
        return Err(format!("blob has {} trailing bytes", blob.len() as u64 - expected));
    }
    Ok(Container {
        model_config: header.model_config,
        checkpoint: Checkpoint { epoch: header.epoch, val_loss: header.val_loss, params },
    })
}

pub fn write(path: &Path, c: &Container) -> Result<()> {
    error::write(path, encode(c))
}

pub fn read(path: &Path) -> Result<Container> {
    decode(&error::read(path)?).map_err(|m| Error::format(path, m))
}

/// Copies matching tensors from the checkpoint at `path` into `store`.
pub fn load_warmstart<T: Real>(store: &mut ParamStore<T>, path: &Path, strict: bool) -> Result<WarmstartReport> {
    let c = read(path)?;
    let tensors: Vec<(String, Tensor4<T>)> = c.checkpoint.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect();
    load_named(store, &tensors, strict).map_err(|e| Error::in_file(path, e))
}
