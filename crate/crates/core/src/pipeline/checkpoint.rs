//! Checkpoint file: `b"TGQC"`, `u32` manifest length, TOML manifest,
//! `u32` tensor count, then per tensor `u32` name length, UTF-8 name, dtype
//! byte, `u8` rank, `u32` dims and the little-endian payload. A CRC32 of
//! everything before it closes the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{DType, Real, Tensor};
use crate::error::{Result, TgqnError};
use crate::params::ParamStore;

use super::config::RunConfig;
use super::model::Model;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TGQC";

/// Held-out metrics recorded during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub step: u64,
    pub l1: f64,
    pub l2: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub step: u64,
    pub sigma: f64,
    pub config: RunConfig,
    #[serde(default)]
    pub metric_history: Vec<MetricPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore<f32>,
}

pub fn encode_checkpoint<T: Real>(manifest: &Manifest, params: &ParamStore<T>) -> Vec<u8> {
    let text = toml::to_string(manifest).expect("manifest serialises");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE as u8);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or("unexpected end of data")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
}

/// Parses and integrity-checks a checkpoint. Only `f32` payloads load.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let integrity = |reason: String| TgqnError::Integrity {
        path: path.to_path_buf(),
        reason,
    };
    let format = |reason: String| TgqnError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 8 {
        return Err(integrity(format!("file is only {} bytes", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(integrity(format!(
            "CRC32 mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    if &body[..4] != CHECKPOINT_MAGIC {
        return Err(format("missing TGQC magic".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: 4,
    };
    let parse = |r: &mut Reader<'_>| -> std::result::Result<(Manifest, ParamStore<f32>), String> {
        let len = r.u32()?;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| e.to_string())?;
        let manifest: Manifest = toml::from_str(text).map_err(|e| format!("manifest: {e}"))?;
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()?;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| e.to_string())?
                .to_string();
            let dtype =
                DType::from_byte(r.u8()?).ok_or_else(|| format!("{name}: unknown dtype"))?;
            if dtype != DType::F32 {
                return Err(format!("{name}: expected f32 payload, found {dtype:?}"));
            }
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32())
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n * 4)?;
            let data = payload.chunks_exact(4).map(f32::read_le).collect();
            store
                .insert(name, Tensor::new(&shape, data))
                .map_err(|e| e.to_string())?;
        }
        if r.pos != r.bytes.len() {
            return Err(format!("{} trailing bytes", r.bytes.len() - r.pos));
        }
        Ok((manifest, store))
    };
    let (manifest, params) = parse(&mut r).map_err(format)?;
    Ok(Checkpoint { manifest, params })
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(path: &Path, manifest: &Manifest, params: &ParamStore<f32>) -> Result<()> {
    let bytes = encode_checkpoint(manifest, params);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| TgqnError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| TgqnError::io(path, e))
}

/// Loads a checkpoint; with `active` given, its architecture fields must
/// agree with the stored configuration.
pub fn load_checkpoint(path: &Path, active: Option<&RunConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| TgqnError::io(path, e))?;
    let ckpt = decode_checkpoint(&bytes, path)?;
    if let Some(active) = active {
        let diff = ckpt.manifest.config.architecture_diff(active);
        if !diff.is_empty() {
            return Err(TgqnError::ConfigMismatch(diff));
        }
    }
    Ok(ckpt)
}

impl Checkpoint {
    /// Rebuilds the model and checks that names and shapes match the file.
    pub fn model(&self) -> Result<Model> {
        let (model, fresh) = Model::new::<f32>(&self.manifest.config, 0)?;
        if fresh.len() != self.params.len() {
            return Err(TgqnError::contract(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                fresh.len()
            )));
        }
        for ((a, ta), (b, tb)) in fresh.iter().zip(self.params.iter()) {
            if a != b || ta.shape() != tb.shape() {
                return Err(TgqnError::contract(format!(
                    "checkpoint tensor {b} {:?} does not match {a} {:?}",
                    tb.shape(),
                    ta.shape()
                )));
            }
        }
        Ok(model)
    }
}
