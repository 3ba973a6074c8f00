//! Binary checkpoint format.
//!
//! Layout (little endian):
//!
//! ```text
//! magic   8 bytes  "ISDCKPT\0"
//! version u32
//! hlen    u64      length of the JSON header
//! header  hlen     {"arch": ..., "arrays": [{"name", "len"}], "extra": ...}
//! arrays  f64 × Σlen, in header order
//! ```
//!
//! Parameters are stored as raw IEEE-754 bits so a save/load round trip is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::model::{ArchConfig, ConvDetector, DetectorModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ISDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub params: Vec<f64>,
    /// Optimizer momentum, present in training checkpoints.
    pub velocity: Option<Vec<f64>>,
    /// Free-form metadata (trainer state, provenance).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    arrays: Vec<ArrayEntry>,
    extra: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &ConvDetector) -> Self {
        Self {
            arch: model.arch().clone(),
            params: model.params().to_vec(),
            velocity: None,
            extra: serde_json::Value::Null,
        }
    }

    pub fn into_model(self) -> Result<ConvDetector> {
        ConvDetector::from_params(self.arch, self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = vec![ArrayEntry {
            name: "params".into(),
            len: self.params.len(),
        }];
        if let Some(v) = &self.velocity {
            arrays.push(ArrayEntry {
                name: "velocity".into(),
                len: v.len(),
            });
        }
        let header = serde_json::to_vec(&Header {
            arch: self.arch.clone(),
            arrays,
            extra: self.extra.clone(),
        })?;
        let n_values = self.params.len() + self.velocity.as_ref().map_or(0, Vec::len);
        let mut out = Vec::with_capacity(20 + header.len() + 8 * n_values);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.params.iter().chain(self.velocity.iter().flatten()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version}, this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
        let mut cursor = header_end;
        let mut params = None;
        let mut velocity = None;
        for entry in &header.arrays {
            let end = cursor
                .checked_add(entry.len * 8)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| bad("truncated parameter data"))?;
            let values: Vec<f64> = bytes[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor = end;
            match entry.name.as_str() {
                "params" => params = Some(values),
                "velocity" => velocity = Some(values),
                other => return Err(Error::Checkpoint(format!("unknown array {other:?}"))),
            }
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after parameter data"));
        }
        let params = params.ok_or_else(|| bad("missing parameter array"))?;
        if params.len() != header.arch.num_params() {
            return Err(bad("parameter count does not match the architecture"));
        }
        Ok(Self {
            arch: header.arch,
            params,
            velocity,
            extra: header.extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
