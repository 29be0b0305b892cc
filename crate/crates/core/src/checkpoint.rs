//! Versioned binary container for a model.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "CLVCKPT\0"
//! version  u32
//! meta     u64 length + JSON {config, vocab, epoch, step}
//! count    u64
//! tensors  count × (u32 name length, name, u64 rows, u64 cols, rows·cols f64)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::corpus::Vocabulary;
use crate::error::{ClvError, Result};
use crate::model::ClvModel;

const MAGIC: &[u8; 8] = b"CLVCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingState {
    pub epoch: usize,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    vocab: Vec<String>,
    state: TrainingState,
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &ClvModel, state: &TrainingState) -> Result<()> {
    let meta = serde_json::to_vec(&Meta {
        config: model.config.clone(),
        vocab: model.vocab.tokens().to_vec(),
        state: state.clone(),
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u64).to_le_bytes())?;
    w.write_all(&meta)?;
    w.write_all(&(model.store.len() as u64).to_le_bytes())?;
    for (_, p) in model.store.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes())?;
        w.write_all(p.name.as_bytes())?;
        let (r, c) = p.value.dim();
        w.write_all(&(r as u64).to_le_bytes())?;
        w.write_all(&(c as u64).to_le_bytes())?;
        for v in p.value.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_len<R: Read>(r: &mut R, limit: u64, what: &str) -> Result<usize> {
    let n = read_u64(r)?;
    if n > limit {
        return Err(ClvError::Checkpoint(format!("implausible {what} {n}")));
    }
    Ok(n as usize)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ClvModel, TrainingState)> {
    let mut magic = [0; 8];
    r.read_exact(&mut magic)
        .map_err(|_| ClvError::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(ClvError::Checkpoint("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(ClvError::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = read_len(&mut r, 1 << 30, "metadata length")?;
    let mut meta = vec![0; meta_len];
    r.read_exact(&mut meta)?;
    let meta: Meta = serde_json::from_slice(&meta)?;
    let mut model = ClvModel::new(meta.config, Vocabulary::from_tokens(meta.vocab), 0)?;
    let count = read_len(&mut r, 1 << 20, "tensor count")?;
    if count != model.store.len() {
        return Err(ClvError::Checkpoint(format!(
            "expected {} tensors, found {count}",
            model.store.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| ClvError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rows = read_len(&mut r, 1 << 32, "row count")?;
        let cols = read_len(&mut r, 1 << 32, "column count")?;
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| ClvError::Checkpoint(format!("unexpected tensor `{name}`")))?;
        if model.store.value(id).dim() != (rows, cols) {
            return Err(ClvError::Checkpoint(format!(
                "tensor `{name}` has shape {rows}×{cols}, expected {:?}",
                model.store.value(id).dim()
            )));
        }
        let mut data = vec![0u8; rows * cols * 8];
        r.read_exact(&mut data)?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *model.store.value_mut(id) = Array2::from_shape_vec((rows, cols), values).unwrap();
        seen[id.0] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(ClvError::Checkpoint("duplicate tensor names".into()));
    }
    Ok((model, meta.state))
}

pub fn save(path: impl AsRef<Path>, model: &ClvModel, state: &TrainingState) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), model, state)
}

pub fn load(path: impl AsRef<Path>) -> Result<(ClvModel, TrainingState)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| ClvError::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint(BufReader::new(f))
}
