//! Checkpoint container for named parameter arrays.
//!
//! ```text
//! "PSGK" | u32 version | u32 len, header JSON, u32 crc32 | u32 len, body, u32 crc32
//! body: u32 count, then per array: u16 name length, name, u32 rank, u32 dims..., f64 values
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParamStore, RelationModel};
use crate::codec::{to_u16, to_u32, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numeric::Array;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"PSGK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Student,
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    /// EMA decay of a teacher checkpoint.
    pub ema_decay: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f64>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &RelationModel<T>, kind: CheckpointKind, ema_decay: Option<f64>) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                kind,
                config: model.config().clone(),
                ema_decay,
            },
            params: model.params().cast(),
        }
    }

    pub fn into_model<T: Scalar>(self) -> Result<RelationModel<T>> {
        RelationModel::from_params(self.header.config, self.params.cast())
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut body = ByteWriter::default();
    body.u32(to_u32(ckpt.params.len(), "parameter count")?);
    for (name, value) in ckpt.params.entries() {
        body.u16(to_u16(name.len(), "parameter name")?);
        body.bytes(name.as_bytes());
        body.u32(to_u32(value.ndim(), "rank")?);
        for &d in value.shape() {
            body.u32(to_u32(d, "dimension")?);
        }
        for &v in value.data() {
            body.f64(v);
        }
    }
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.checked_block(&serde_json::to_vec(&ckpt.header)?);
    w.checked_block(&body.buf);
    Ok(w.buf)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes, "checkpoint header");
    if r.take(4)? != MAGIC {
        return Err(r.error("bad magic, not a checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: CheckpointHeader = serde_json::from_slice(r.checked_block()?).map_err(|e| r.error(e.to_string()))?;
    r.set_context("checkpoint body");
    let body = r.checked_block()?;
    r.finish()?;

    let mut b = ByteReader::new(body, "checkpoint body");
    let count = b.u32()? as usize;
    let mut params = ParamStore::default();
    for _ in 0..count {
        let len = b.u16()? as usize;
        let name = std::str::from_utf8(b.take(len)?)
            .map_err(|_| b.error("parameter name is not UTF-8"))?
            .to_string();
        b.set_context(format!("checkpoint parameter {name}"));
        let rank = b.u32()? as usize;
        if rank.saturating_mul(4) > b.remaining() {
            return Err(b.error("rank exceeds body size"));
        }
        let shape = (0..rank).map(|_| Ok(b.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.saturating_mul(8) <= b.remaining())
            .ok_or_else(|| b.error(format!("shape {shape:?} exceeds body size")))?;
        let data = (0..numel).map(|_| b.f64()).collect::<Result<Vec<_>>>()?;
        params.insert(name, Array::new(shape, data)?)?;
    }
    b.finish()?;
    Ok(Checkpoint { header, params })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, write_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(&std::fs::read(path)?)
}
