//! Binary checkpoint files.
//!
//! Layout: `b"DTAD"`, format version (u32 LE), metadata length (u64 LE) and
//! TOML metadata, record count (u32 LE), then one record per array:
//! name length (u32 LE) and UTF-8 name, rank (u32 LE), dims (u64 LE each)
//! and an f32 LE payload. Optimizer moments are stored as extra records
//! named `adam.m.<param>` and `adam.v.<param>`.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormalizationStats;
use crate::error::{DtaadError, Result};
use crate::model::DtaadConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::trainer::{EpochRecord, OptimizerState, TrainerConfig};

pub const MAGIC: &[u8; 4] = b"DTAD";
pub const FORMAT_VERSION: u32 = 1;

const MOMENT_M: &str = "adam.m.";
const MOMENT_V: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: DtaadConfig,
    pub trainer: TrainerConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub param_count: usize,
    pub optimizer_step: u64,
    pub normalization: Option<NormalizationStats>,
    /// Per-dimension final thresholds calibrated on training scores.
    pub thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut meta = ckpt.meta.clone();
    meta.format_version = FORMAT_VERSION;
    meta.param_count = ckpt.params.len();
    meta.optimizer_step = ckpt.optimizer.as_ref().map_or(0, |o| o.step);
    let text = toml::to_string(&meta).map_err(|e| DtaadError::State(format!("cannot serialize metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let moments = ckpt.optimizer.as_ref().map_or(0, |_| 2 * ckpt.params.len());
    put_u32(&mut out, (ckpt.params.len() + moments) as u32);
    for (name, t) in ckpt.params.iter() {
        put_record(&mut out, name, t.shape(), t.data());
    }
    if let Some(opt) = &ckpt.optimizer {
        for (prefix, buffers) in [(MOMENT_M, &opt.m), (MOMENT_V, &opt.v)] {
            for ((name, t), buf) in ckpt.params.iter().zip(buffers) {
                put_record(&mut out, &format!("{prefix}{name}"), t.shape(), buf);
            }
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let left = self.0.get_ref().len() - self.0.position() as usize;
        if n > left {
            return Err(DtaadError::CorruptCheckpoint(format!(
                "file ends after {} bytes, {n} more expected",
                self.0.position()
            )));
        }
        let mut buf = vec![0; n];
        self.0.read_exact(&mut buf)?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, v: u64) -> Result<usize> {
        usize::try_from(v).map_err(|_| DtaadError::CorruptCheckpoint(format!("length {v} too large")))
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.bytes(name_len)?)
            .map_err(|_| DtaadError::CorruptCheckpoint("record name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            let d = self.u64()?;
            shape.push(self.len(d)?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| DtaadError::CorruptCheckpoint(format!("record {name} is too large")))?;
        let raw = self.bytes(numel)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader(Cursor::new(bytes));
    if r.bytes(4)? != MAGIC {
        return Err(DtaadError::UnsupportedFormat("missing DTAD magic bytes".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(DtaadError::UnsupportedFormat(format!(
            "checkpoint format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let meta_len = r.u64()?;
    let meta_len = r.len(meta_len)?;
    let text = String::from_utf8(r.bytes(meta_len)?)
        .map_err(|_| DtaadError::CorruptCheckpoint("metadata is not UTF-8".into()))?;
    let meta: CheckpointMeta =
        toml::from_str(&text).map_err(|e| DtaadError::CorruptCheckpoint(format!("bad metadata: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for _ in 0..count {
        let (name, t) = r.record()?;
        if name.starts_with(MOMENT_M) {
            m.push(t.into_data());
        } else if name.starts_with(MOMENT_V) {
            v.push(t.into_data());
        } else {
            params.add(name, t);
        }
    }
    if r.0.position() as usize != bytes.len() {
        return Err(DtaadError::CorruptCheckpoint("trailing bytes after last record".into()));
    }
    if params.len() != meta.param_count {
        return Err(DtaadError::CorruptCheckpoint(format!(
            "metadata lists {} parameters, file holds {}",
            meta.param_count,
            params.len()
        )));
    }
    let optimizer = match (m.len(), v.len()) {
        (0, 0) => None,
        (a, b) if a == params.len() && b == params.len() => Some(OptimizerState {
            m,
            v,
            step: meta.optimizer_step,
        }),
        _ => return Err(DtaadError::CorruptCheckpoint("incomplete optimizer moments".into())),
    };
    Ok(Checkpoint {
        meta,
        params,
        optimizer,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}
