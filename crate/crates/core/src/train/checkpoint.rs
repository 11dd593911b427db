//! Checkpoint container.
//!
//! ```text
//! b"AMCK1"
//! u32 LE   manifest length N
//! N bytes  UTF-8 JSON manifest (configs, catalog, counters, metrics, tensor index)
//! ...      little-endian f64 tensor payloads in manifest order
//! u32 LE   CRC32 of the payload
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adamw::{Counters, TrainState};
use crate::data::Catalog;
use crate::error::{Error, ParseError, Result};
use crate::params::Params;
use crate::seg::HeadConfig;
use crate::tensor::Tensor;
use crate::vit::VitConfig;

pub const MAGIC: &[u8; 5] = b"AMCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Pretrain,
    Finetune,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: u64,
    pub split: String,
    pub loss: f64,
    pub dice: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: u64,
    pub val_dice: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    /// Resolved run configuration, echoed verbatim.
    pub config: serde_json::Value,
    pub vit: VitConfig,
    pub head: Option<HeadConfig>,
    pub catalog: Catalog,
    pub state: TrainState<f64>,
    pub metrics: Vec<MetricRecord>,
    pub best: Option<BestRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    kind: CheckpointKind,
    config: serde_json::Value,
    vit: VitConfig,
    head: Option<HeadConfig>,
    catalog: Catalog,
    counters: Counters,
    metrics: Vec<MetricRecord>,
    best: Option<BestRecord>,
    tensors: Vec<TensorEntry>,
}

const GROUPS: [&str; 3] = ["param", "m", "v"];

impl Checkpoint {
    fn groups(&self) -> [&Params<f64>; 3] {
        [&self.state.params, &self.state.m, &self.state.v]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (group, set) in GROUPS.iter().zip(self.groups()) {
            for (name, t) in set.iter() {
                tensors.push(TensorEntry { group: group.to_string(), name: name.to_string(), shape: t.shape().to_vec() });
                for x in t.data() {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            kind: self.kind,
            config: self.config.clone(),
            vit: self.vit.clone(),
            head: self.head.clone(),
            catalog: self.catalog.clone(),
            counters: self.state.counters,
            metrics: self.metrics.clone(),
            best: self.best,
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serialises");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ParseError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ParseError::BadMagic);
        }
        let trunc = |expected: usize| ParseError::Truncated { expected, found: bytes.len() };
        let mut at = MAGIC.len();
        let len_bytes = bytes.get(at..at + 4).ok_or_else(|| trunc(at + 4))?;
        let len = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
        at += 4;
        let json = bytes.get(at..at + len).ok_or_else(|| trunc(at + len))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| ParseError::Header(e.to_string()))?;
        if manifest.version != FORMAT_VERSION {
            return Err(ParseError::Header(format!("unsupported version {}", manifest.version)));
        }
        at += len;
        let total: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let payload = bytes.get(at..at + total * 8).ok_or_else(|| trunc(at + total * 8))?;
        at += total * 8;
        let crc = bytes.get(at..at + 4).ok_or_else(|| trunc(at + 4))?;
        let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(ParseError::Checksum { stored, computed });
        }
        at += 4;
        if at != bytes.len() {
            return Err(ParseError::TrailingBytes(bytes.len() - at));
        }
        let mut sets = [Params::new(), Params::new(), Params::new()];
        let mut off = 0;
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let data = payload[off..off + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            off += n * 8;
            let gi = GROUPS
                .iter()
                .position(|g| *g == e.group)
                .ok_or_else(|| ParseError::Header(format!("unknown tensor group `{}`", e.group)))?;
            let t = Tensor::new(e.shape, data).map_err(|err| ParseError::Header(err.to_string()))?;
            sets[gi].insert(e.name, t);
        }
        let [params, m, v] = sets;
        Ok(Checkpoint {
            kind: manifest.kind,
            config: manifest.config,
            vit: manifest.vit,
            head: manifest.head,
            catalog: manifest.catalog,
            state: TrainState { params, m, v, counters: manifest.counters },
            metrics: manifest.metrics,
            best: manifest.best,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|source| Error::Parse { path: path.to_path_buf(), source })
    }
}

/// Writes one JSON object per line.
pub fn write_metrics(path: &Path, metrics: &[MetricRecord]) -> Result<()> {
    let mut out = Vec::new();
    for m in metrics {
        serde_json::to_writer(&mut out, m)?;
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}
