//! Binary checkpoint: `TRIADCK1`, a little-endian `u64` header length, a JSON header, raw
//! little-endian `f32` payload, then the CRC32 of the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use triad_tensor::Tensor;

use super::optim::{Optimizer, OptimizerKind};
use super::{PretrainError, Result};
use crate::model::{EncoderConfig, ParamSet};

pub const MAGIC: &[u8; 8] = b"TRIADCK1";

/// Position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub optimizer: Optimizer,
    pub step: u64,
    pub config_hash: String,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config_hash: String,
    step: u64,
    rng: RngState,
    optimizer: OptimizerKind,
    optimizer_t: u64,
    payload_bytes: u64,
    tensors: Vec<Entry>,
}

/// Digest of everything that fixes parameter names and shapes.
pub fn model_hash(cfg: &EncoderConfig) -> String {
    let canon = serde_json::to_string(cfg).expect("config serializes");
    let d = Sha256::digest(canon.as_bytes());
    d.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

fn groups(c: &Checkpoint) -> Vec<(String, Vec<(&str, &Tensor<f32>)>)> {
    let mut out = vec![("param".to_owned(), c.params.iter().collect::<Vec<_>>())];
    for (slot, bufs) in &c.optimizer.state {
        out.push((format!("opt.{slot}"), bufs.iter().map(|(k, v)| (k.as_str(), v)).collect()));
    }
    out
}

pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (group, items) in groups(c) {
        for (name, t) in items {
            tensors.push(Entry { group: group.clone(), name: name.to_owned(), shape: t.shape().to_vec(), offset: payload.len() as u64 });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        config_hash: c.config_hash.clone(),
        step: c.step,
        rng: c.rng,
        optimizer: c.optimizer.kind,
        optimizer_t: c.optimizer.t,
        payload_bytes: payload.len() as u64,
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

fn integrity(msg: impl Into<String>) -> PretrainError {
    PretrainError::Integrity(msg.into())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(integrity("missing checkpoint magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let hend = 16u64.checked_add(hlen).filter(|&e| e <= bytes.len() as u64).ok_or_else(|| integrity("header runs past end of file"))?
        as usize;
    let header: Header = serde_json::from_slice(&bytes[16..hend]).map_err(|e| integrity(format!("bad header: {e}")))?;
    let expected = hend as u64 + header.payload_bytes + 4;
    if bytes.len() as u64 != expected {
        return Err(integrity(format!("file is {} bytes, header implies {expected}", bytes.len())));
    }
    let pend = hend + header.payload_bytes as usize;
    let payload = &bytes[hend..pend];
    let crc = u32::from_le_bytes(bytes[pend..].try_into().unwrap());
    if crc32fast::hash(payload) != crc {
        return Err(integrity("payload checksum mismatch"));
    }

    let mut params = ParamSet::new();
    let mut optimizer = Optimizer::new(header.optimizer);
    optimizer.t = header.optimizer_t;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start.checked_add(n * 4).filter(|&x| x <= payload.len()).ok_or_else(|| integrity(format!("tensor `{}` out of bounds", e.name)))?;
        let data = payload[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::from_vec(&e.shape, data);
        match e.group.strip_prefix("opt.") {
            None if e.group == "param" => {
                if params.contains(&e.name) {
                    return Err(integrity(format!("duplicate tensor `{}`", e.name)));
                }
                params.insert(e.name, t);
            }
            Some(slot) => {
                let bufs = optimizer.state.get_mut(slot).ok_or_else(|| integrity(format!("unknown optimizer slot `{slot}`")))?;
                bufs.insert(e.name, t);
            }
            None => return Err(integrity(format!("unknown tensor group `{}`", e.group))),
        }
    }
    Ok(Checkpoint { params, optimizer, step: header.step, config_hash: header.config_hash, rng: header.rng })
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint behind.
pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(c);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

/// Checks that `c` was written for a model with config hash `expected`.
pub fn check_compatible(c: &Checkpoint, expected: &str) -> Result<()> {
    if c.config_hash != expected {
        return Err(PretrainError::Compatibility(format!(
            "checkpoint was written for model {} but the current model is {expected}",
            c.config_hash
        )));
    }
    Ok(())
}

/// Loads a checkpoint and checks it against the model `cfg` describes.
pub fn load_checkpoint_for(path: &Path, cfg: &EncoderConfig) -> Result<Checkpoint> {
    let c = load_checkpoint(path)?;
    check_compatible(&c, &model_hash(cfg))?;
    Ok(c)
}
