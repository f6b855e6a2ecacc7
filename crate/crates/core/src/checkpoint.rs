//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PLGC" | version u32 | config hash (u32 len + utf8) | step u64
//! | kind (str) | config json (str) | metric history json (str)
//! | tensor count u32 | per tensor: name (str), rank u32, dims u64 x rank, f32 data
//! ```
//!
//! Tensor names are prefixed by owner: `tok.` tokenizer, `ar.` AR model,
//! `pro.` post-hoc prologue encoder, `opt.` optimizer moments.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::config::RunConfig;
use crate::data::{write_str, ByteReader};
use crate::error::{Error, Result};
use crate::metrics::MetricLog;

const MAGIC: &[u8; 4] = b"PLGC";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_hash: String,
    pub step: u64,
    /// What produced the file: `stage1`, `stage2`, `post` or `onestage`.
    pub kind: String,
    pub history: MetricLog,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, kind: &str, step: u64, history: MetricLog) -> Self {
        Self {
            config: config.clone(),
            config_hash: config.hash(),
            step,
            kind: kind.to_string(),
            history,
            tensors: BTreeMap::new(),
        }
    }

    pub fn extend(&mut self, tensors: BTreeMap<String, Tensor>) {
        self.tensors.extend(tensors);
    }

    /// Tensors under `prefix.` with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_str(&mut out, &self.config_hash);
        out.extend_from_slice(&self.step.to_le_bytes());
        write_str(&mut out, &self.kind);
        write_str(&mut out, &self.config.canonical_json());
        write_str(&mut out, &serde_json::to_string(&self.history)?);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            write_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (missing PLGC magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_hash = r.string()?;
        let step = r.u64()?;
        let kind = r.string()?;
        let config: RunConfig = serde_json::from_str(&r.string()?)?;
        if config.hash() != config_hash {
            return Err(Error::Format(format!("config hash mismatch: header {config_hash}, body {}", config.hash())));
        }
        let history: MetricLog = serde_json::from_str(&r.string()?)?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.insert(name, Tensor::from_vec(data, dims, device)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { config, config_hash, step, kind, history, tensors })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, &Device::Cpu)
    }
}
