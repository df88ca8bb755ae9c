//! `efr-ckpt-1` container.
//!
//! Layout: 8-byte magic `EFRCKPT\0`, little-endian `u64` header length, UTF-8
//! JSON header, little-endian `f32` payload (parameters in header order, then
//! optimizer first and second moments when present), and a trailing SHA-256
//! of every preceding byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "efr-ckpt-1";
const MAGIC: &[u8; 8] = b"EFRCKPT\0";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub params: ParamStore<f32>,
    pub adam: Option<Adam>,
    /// Epochs completed.
    pub epoch: usize,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(model_config: ModelConfig, params: ParamStore<f32>) -> Self {
        Checkpoint { model_config, train_config: None, params, adam: None, epoch: 0, meta: BTreeMap::new() }
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            model_config: t.model.config.clone(),
            train_config: Some(t.config.clone()),
            params: t.model.params.clone(),
            adam: Some(t.adam.clone()),
            epoch: t.epoch,
            meta: BTreeMap::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    model_config: ModelConfig,
    #[serde(default)]
    train_config: Option<TrainConfig>,
    epoch: usize,
    arrays: Vec<ArrayEntry>,
    #[serde(default)]
    optimizer_step: Option<u64>,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

fn push_f32(buf: &mut Vec<u8>, t: &Tensor<f32>) {
    for x in &t.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let header = Header {
        version: CHECKPOINT_VERSION.into(),
        model_config: ck.model_config.clone(),
        train_config: ck.train_config.clone(),
        epoch: ck.epoch,
        arrays: ck.params.iter().map(|(n, t)| ArrayEntry { name: n.into(), rows: t.rows, cols: t.cols }).collect(),
        optimizer_step: ck.adam.as_ref().map(|a| a.step),
        meta: ck.meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * ck.params.scalar_count() + DIGEST_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in ck.params.iter() {
        push_f32(&mut buf, t);
    }
    if let Some(adam) = &ck.adam {
        for t in adam.m.iter().chain(&adam.v) {
            push_f32(&mut buf, t);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    // write-then-rename so readers never see a partial file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        DecodeError::Corrupt(message) => Error::Corrupt { path: path.to_path_buf(), message },
        DecodeError::Other(e) => e,
    })
}

enum DecodeError {
    Corrupt(String),
    Other(Error),
}

fn corrupt(msg: impl Into<String>) -> DecodeError {
    DecodeError::Corrupt(msg.into())
}

fn decode(bytes: &[u8]) -> std::result::Result<Checkpoint, DecodeError> {
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
        return Err(corrupt("file too short"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let json = body.get(16..16usize.saturating_add(hlen)).ok_or_else(|| corrupt("header length exceeds file"))?;
    let value: serde_json::Value = serde_json::from_slice(json).map_err(|e| corrupt(format!("header is not JSON: {e}")))?;
    let version = value.get("version").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if version != CHECKPOINT_VERSION {
        return Err(DecodeError::Other(Error::Incompatible(format!("checkpoint version `{version}`, expected `{CHECKPOINT_VERSION}`"))));
    }
    let header: Header = serde_json::from_value(value).map_err(|e| corrupt(format!("bad header: {e}")))?;
    let mut payload = &body[16 + hlen..];
    let mut take = |rows: usize, cols: usize| -> std::result::Result<Tensor<f32>, DecodeError> {
        let n = rows.checked_mul(cols).ok_or_else(|| corrupt("array size overflows"))?;
        if payload.len() < 4 * n {
            return Err(corrupt("payload truncated"));
        }
        let (head, rest) = payload.split_at(4 * n);
        payload = rest;
        Ok(Tensor::from_vec(rows, cols, head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()))
    };
    let mut params = ParamStore::empty();
    for a in &header.arrays {
        params.insert(a.name.clone(), take(a.rows, a.cols)?);
    }
    let adam = match header.optimizer_step {
        Some(step) => {
            let mut m = Vec::with_capacity(header.arrays.len());
            let mut v = Vec::with_capacity(header.arrays.len());
            for a in &header.arrays {
                m.push(take(a.rows, a.cols)?);
            }
            for a in &header.arrays {
                v.push(take(a.rows, a.cols)?);
            }
            let mut adam = Adam::new(&params);
            adam.step = step;
            adam.m = m;
            adam.v = v;
            Some(adam)
        }
        None => None,
    };
    if !payload.is_empty() {
        return Err(corrupt(format!("{} trailing payload bytes", payload.len())));
    }
    params.check_layout(&header.model_config).map_err(DecodeError::Other)?;
    Ok(Checkpoint { model_config: header.model_config, train_config: header.train_config, params, adam, epoch: header.epoch, meta: header.meta })
}
