//! Binary checkpoints (`VTCK`).
//!
//! Layout: magic, u32 version, length-prefixed JSON header (configs and
//! schedule position), u32 tensor count, then per tensor a length-prefixed
//! name, u32 rank, u32 dims, f64 payload and a u64 FNV-1a checksum of the
//! payload bytes. A u64 FNV-1a checksum of everything before it ends the
//! file. Optimiser moments are stored as tensors named `optim.m.<param>`
//! and `optim.v.<param>`.

use std::collections::HashMap;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::{OptimizerState, TrainConfig, Trainer};
use crate::data::format::{put_f64s, put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ViTree};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub optimizer_t: u64,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| Error::Config("string too long for checkpoint".into()))?;
    put_u32(out, len);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    put_str(out, name)?;
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    let start = out.len();
    put_f64s(out, data);
    let sum = fnv1a(&out[start..]);
    put_u64(out, sum);
    Ok(())
}

/// Serialises a trainer's full state.
pub fn encode(trainer: &Trainer) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: trainer.model.config().clone(),
        train: trainer.config.clone(),
        epoch: trainer.epoch,
        step: trainer.step,
        optimizer_t: trainer.state.t,
    };
    let json = serde_json::to_string(&header)?;
    let store = &trainer.store;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_str(&mut out, &json)?;
    let count = store.len() + 2 * trainer.state.moments.len();
    put_u32(&mut out, count as u32);
    for id in store.ids() {
        let t = store.get(id);
        put_tensor(&mut out, store.name(id), t.shape(), t.data())?;
    }
    for (id, m, v) in &trainer.state.moments {
        let shape = store.get(*id).shape();
        put_tensor(&mut out, &format!("optim.m.{}", store.name(*id)), shape, m)?;
        put_tensor(&mut out, &format!("optim.v.{}", store.name(*id)), shape, v)?;
    }
    let sum = fnv1a(&out);
    put_u64(&mut out, sum);
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, trainer: &Trainer) -> Result<()> {
    fs::write(path, encode(trainer)?)?;
    Ok(())
}

struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Rebuilds a trainer from checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version("checkpoint", CHECKPOINT_VERSION)?;
    let json_len = r.u32("header length")? as usize;
    let json_at = r.offset();
    let json = r.bytes(json_len, "header")?;
    let header: CheckpointHeader = serde_json::from_slice(json)
        .map_err(|e| Error::format(json_at, format!("invalid header JSON: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut tensors = HashMap::new();
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name_at = r.offset();
        let name = std::str::from_utf8(r.bytes(name_len, "tensor name")?)
            .map_err(|_| Error::format(name_at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::format(r.offset(), format!("{name}: shape overflows")))?;
        let payload_at = r.offset() as usize;
        let data = r.f64s(numel, "tensor payload")?;
        let stored = r.u64("tensor checksum")?;
        let actual = fnv1a(&bytes[payload_at..payload_at + 8 * numel]);
        if stored != actual {
            return Err(Error::Checksum(format!(
                "tensor {name}: stored {stored:016x}, computed {actual:016x}"
            )));
        }
        if tensors.insert(name.clone(), RawTensor { shape, data }).is_some() {
            return Err(Error::format(name_at, format!("duplicate tensor {name}")));
        }
    }
    let body_len = r.offset() as usize;
    let stored = r.u64("file checksum")?;
    r.finish()?;
    let actual = fnv1a(&bytes[..body_len]);
    if stored != actual {
        return Err(Error::Checksum(format!(
            "file: stored {stored:016x}, computed {actual:016x}"
        )));
    }

    let (model, mut store) = ViTree::new(&header.model)?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint lacks tensor {name}")))?;
        if t.shape != shape {
            return Err(Error::dim(format!(
                "tensor {name} has shape {:?} but the embedded config needs {shape:?}",
                t.shape
            )));
        }
        Ok(t.data)
    };
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let shape = store.get(id).shape().to_vec();
        let data = take(&name, &shape)?;
        store.set(id, &data)?;
    }
    let mut state = OptimizerState::new(&store);
    state.t = header.optimizer_t;
    for (id, m, v) in &mut state.moments {
        let name = store.name(*id);
        let shape = store.get(*id).shape();
        *m = take(&format!("optim.m.{name}"), shape)?;
        *v = take(&format!("optim.v.{name}"), shape)?;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Contract(format!("checkpoint has unexpected tensor {extra}")));
    }
    let mut trainer = Trainer::new(model, store, header.train)?;
    trainer.state = state;
    trainer.epoch = header.epoch;
    trainer.step = header.step;
    Ok(trainer)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Trainer> {
    decode(&fs::read(path)?)
}
