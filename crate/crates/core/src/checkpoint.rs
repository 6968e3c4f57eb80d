//! Single-file archive of named tensors plus the training config and metadata.
//!
//! Layout (little endian): magic `PIRCKPT1`, `u32` schema version, config
//! TOML and meta TOML as `u64`-length-prefixed UTF-8, `u64` tensor count,
//! then per tensor: `u32` name length, name, `u8` dtype (0 = f32), `u32`
//! rank, `u64` dims, raw values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use pir_tensor::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::TrainingConfig;
use crate::error::{PirError, Result};
use crate::metrics::MetricsReport;

pub const MAGIC: &[u8; 8] = b"PIRCKPT1";
pub const SCHEMA_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Pretrained source generator only.
    Source,
    /// Adaptation with the translator.
    Pir,
    /// Adaptation without translator or reconstruction loss.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub iteration: u64,
    /// Update counts of the optimizers stored under `opt_<module>/`.
    #[serde(default)]
    pub optimizer_steps: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
}

/// Tensors are namespaced: `g_s/`, `g_t/`, `d/`, `f/`, `perc/`, and optimizer
/// moments under `opt_<module>/m/` and `opt_<module>/v/`.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: TrainingConfig,
    pub meta: CheckpointMeta,
    pub tensors: ParamSet<f32>,
}

impl Checkpoint {
    pub fn new(config: TrainingConfig, meta: CheckpointMeta, tensors: ParamSet<f32>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config,
            meta,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.schema_version.to_le_bytes());
        for text in [self.config.to_toml_string()?, toml::to_string(&self.meta)?] {
            out.extend_from_slice(&(text.len() as u64).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(PirError::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != SCHEMA_VERSION {
            return Err(PirError::Checkpoint(format!(
                "schema version {version} is not supported (expected {SCHEMA_VERSION})"
            )));
        }
        let config = TrainingConfig::from_toml_str(&read_text(&mut r)?)?;
        let meta: CheckpointMeta = toml::from_str(&read_text(&mut r)?)?;
        let count = u64::from_le_bytes(take(&mut r)?);
        let mut tensors = ParamSet::new();
        for _ in 0..count {
            let len = u32::from_le_bytes(take(&mut r)?) as usize;
            let name = String::from_utf8(read_vec(&mut r, len)?)
                .map_err(|_| PirError::Checkpoint("tensor name is not UTF-8".into()))?;
            let [dtype] = take::<1>(&mut r)?;
            if dtype != DTYPE_F32 {
                return Err(PirError::Checkpoint(format!("tensor `{name}` has unknown dtype {dtype}")));
            }
            let ndim = u32::from_le_bytes(take(&mut r)?) as usize;
            let shape: Vec<usize> = (0..ndim)
                .map(|_| take(&mut r).map(|b| u64::from_le_bytes(b) as usize))
                .collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let raw = read_vec(&mut r, numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, Tensor::from_vec(&shape, data)?);
        }
        if !r.is_empty() {
            return Err(PirError::Checkpoint("trailing bytes after the last tensor".into()));
        }
        Ok(Self {
            schema_version: version,
            config,
            meta,
            tensors,
        })
    }

    /// Written to a sibling temporary file first, then renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| PirError::NotFound(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Tensors under `prefix/`, with the prefix removed.
    pub fn module(&self, prefix: &str) -> ParamSet<f32> {
        self.tensors.scoped(prefix)
    }
}

fn truncated() -> PirError {
    PirError::Checkpoint("file is truncated".into())
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| truncated())
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b)?;
    Ok(b)
}

fn read_vec(r: &mut &[u8], len: usize) -> Result<Vec<u8>> {
    if r.len() < len {
        return Err(truncated());
    }
    let (head, tail) = r.split_at(len);
    *r = tail;
    Ok(head.to_vec())
}

fn read_text(r: &mut &[u8]) -> Result<String> {
    let len = u64::from_le_bytes(take(r)?) as usize;
    String::from_utf8(read_vec(r, len)?).map_err(|_| PirError::Checkpoint("header is not UTF-8".into()))
}
