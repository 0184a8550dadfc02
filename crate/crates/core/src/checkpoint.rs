//! Binary checkpoint container for models and tuning states.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "TXRCKPT\0"
//! version  u32      currently 1
//! kind     u8       0 = model, 1 = tuning state, 2 = quantized model
//! header   u32 len + that many bytes of JSON
//! count    u32      tensor blocks
//! block    u32 name len + name bytes
//!          u8  dtype (0 = f32, 1 = int8)
//!          u64 rows, u64 cols
//!          f32 scale            (int8 blocks only)
//!          payload              (rows*cols * 4 bytes f32, or rows*cols int8)
//! trailer  32 bytes  sha256 over everything above
//! ```
//!
//! The trailer doubles as the artifact's fingerprint; `fingerprint` computes
//! the same digest in memory without touching disk, so a freshly trained model
//! and its saved file agree byte-for-byte on identity.

use std::io::{Read as _, Write as _};
use std::path::Path;
use std::rc::Rc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{TuneMethod, TuningState};
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};

pub const MAGIC: &[u8; 8] = b"TXRCKPT\0";
pub const VERSION: u32 = 1;

pub const KIND_MODEL: u8 = 0;
pub const KIND_TUNING: u8 = 1;
pub const KIND_QUANT: u8 = 2;

#[derive(Clone, Debug)]
pub enum Payload {
    F32(Vec<f32>),
    Int8 { q: Vec<i8>, scale: f32 },
}

#[derive(Clone, Debug)]
pub struct StoredTensor {
    pub rows: usize,
    pub cols: usize,
    pub payload: Payload,
}

impl StoredTensor {
    pub fn from_mat(m: &Mat<f32>) -> StoredTensor {
        StoredTensor {
            rows: m.nrows(),
            cols: m.ncols(),
            payload: Payload::F32(m.iter().copied().collect()),
        }
    }

    pub fn to_mat(&self) -> Result<Mat<f32>> {
        let data = match &self.payload {
            Payload::F32(v) => v.clone(),
            Payload::Int8 { q, scale } => q.iter().map(|&x| x as f32 * scale).collect(),
        };
        Mat::from_shape_vec((self.rows, self.cols), data)
            .map_err(|e| Error::Format(format!("tensor shape mismatch: {}", e)))
    }
}

/// A parsed checkpoint: kind, free-form JSON header, ordered tensor blocks.
pub struct Container {
    pub kind: u8,
    pub header: serde_json::Value,
    pub tensors: Vec<(String, StoredTensor)>,
}

fn encode(c: &Container) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(c.kind);
    let header = serde_json::to_vec(&c.header)
        .map_err(|e| Error::Format(format!("header encode: {}", e)))?;
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
    for (name, t) in &c.tensors {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        out.extend_from_slice(nb);
        match &t.payload {
            Payload::F32(v) => {
                if v.len() != t.rows * t.cols {
                    return Err(Error::Format(format!(
                        "tensor {}: {} values for {}x{}",
                        name,
                        v.len(),
                        t.rows,
                        t.cols
                    )));
                }
                out.push(0u8);
                out.extend_from_slice(&(t.rows as u64).to_le_bytes());
                out.extend_from_slice(&(t.cols as u64).to_le_bytes());
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::Int8 { q, scale } => {
                if q.len() != t.rows * t.cols {
                    return Err(Error::Format(format!(
                        "tensor {}: {} values for {}x{}",
                        name,
                        q.len(),
                        t.rows,
                        t.cols
                    )));
                }
                out.push(1u8);
                out.extend_from_slice(&(t.rows as u64).to_le_bytes());
                out.extend_from_slice(&(t.cols as u64).to_le_bytes());
                out.extend_from_slice(&scale.to_le_bytes());
                out.extend(q.iter().map(|&x| x as u8));
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<Container> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", version)));
    }
    let kind = r.u8()?;
    let hlen = r.u32()? as usize;
    let header: serde_json::Value = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Format(format!("header decode: {}", e)))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let dtype = r.u8()?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("tensor dims overflow".into()))?;
        let payload = match dtype {
            0 => {
                let raw = r.take(n * 4)?;
                let v = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Payload::F32(v)
            }
            1 => {
                let scale = r.f32()?;
                let raw = r.take(n)?;
                Payload::Int8 { q: raw.iter().map(|&b| b as i8).collect(), scale }
            }
            other => return Err(Error::Format(format!("unknown dtype tag {}", other))),
        };
        tensors.push((name, StoredTensor { rows, cols, payload }));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after tensor blocks".into()));
    }
    Ok(Container { kind, header, tensors })
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Fingerprint of a container as it would be written, without writing it.
pub fn container_fingerprint(c: &Container) -> Result<String> {
    Ok(sha_hex(&encode(c)?))
}

/// Write a container; returns the fingerprint stored in its trailer.
pub fn write_container(path: &Path, c: &Container) -> Result<String> {
    let body = encode(c)?;
    let digest = Sha256::digest(&body);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&body)?;
    f.write_all(&digest)?;
    Ok(hex::encode(digest))
}

/// Read and verify a container; returns it with the verified fingerprint.
pub fn read_container(path: &Path) -> Result<(Container, String)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 32 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != trailer {
        return Err(Error::Format("checkpoint fingerprint mismatch (corrupt file)".into()));
    }
    Ok((decode(body)?, hex::encode(digest)))
}

// ─── model wrappers ───

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    config: ModelConfig,
}

fn model_container(params: &Parameters<f32>) -> Result<Container> {
    let header = serde_json::to_value(ModelHeader { config: params.config.clone() })
        .map_err(|e| Error::Format(e.to_string()))?;
    let tensors = params
        .iter()
        .map(|(k, v)| (k.to_string(), StoredTensor::from_mat(v)))
        .collect();
    Ok(Container { kind: KIND_MODEL, header, tensors })
}

pub fn save_model(params: &Parameters<f32>, path: &Path) -> Result<String> {
    write_container(path, &model_container(params)?)
}

/// The identity a `save_model` of these parameters would produce.
pub fn fingerprint(params: &Parameters<f32>) -> Result<String> {
    container_fingerprint(&model_container(params)?)
}

pub fn load_model(path: &Path) -> Result<(Parameters<f32>, String)> {
    let (c, fp) = read_container(path)?;
    if c.kind != KIND_MODEL {
        return Err(Error::Format(format!("expected a model checkpoint, found kind {}", c.kind)));
    }
    let header: ModelHeader = serde_json::from_value(c.header)
        .map_err(|e| Error::Format(format!("model header: {}", e)))?;
    header.config.validate()?;
    let mut params = Parameters::init(&header.config, 0)?;
    let expected: Vec<String> = params.keys().map(|s| s.to_string()).collect();
    let mut seen = IndexMap::new();
    for (name, t) in &c.tensors {
        seen.insert(name.clone(), t.to_mat()?);
    }
    for k in &expected {
        let m = seen
            .swap_remove(k)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {:?}", k)))?;
        if m.dim() != params.get(k).dim() {
            return Err(Error::Format(format!(
                "tensor {:?} has shape {:?}, config wants {:?}",
                k,
                m.dim(),
                params.get(k).dim()
            )));
        }
        *params.get_mut(k) = m;
    }
    if let Some(extra) = seen.keys().next() {
        return Err(Error::Format(format!("checkpoint has unexpected tensor {:?}", extra)));
    }
    Ok((params, fp))
}

// ─── tuning-state wrappers ───

#[derive(Serialize, Deserialize)]
struct StateHeader {
    method: String,
    task: String,
    base_fingerprint: String,
    prompt_count: usize,
    option_count: usize,
    adapter_rank: usize,
}

pub fn save_state(state: &TuningState<f32>, path: &Path) -> Result<String> {
    let header = serde_json::to_value(StateHeader {
        method: state.method.as_str().to_string(),
        task: state.task.clone(),
        base_fingerprint: state.base_fingerprint.clone(),
        prompt_count: state.prompt_count,
        option_count: state.option_count,
        adapter_rank: state.adapter_rank,
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    let tensors = state
        .tensors
        .iter()
        .map(|(k, v)| (k.clone(), StoredTensor::from_mat(v)))
        .collect();
    write_container(path, &Container { kind: KIND_TUNING, header, tensors })
}

pub fn load_state(path: &Path) -> Result<(TuningState<f32>, String)> {
    let (c, fp) = read_container(path)?;
    if c.kind != KIND_TUNING {
        return Err(Error::Format(format!(
            "expected a tuning-state checkpoint, found kind {}",
            c.kind
        )));
    }
    let header: StateHeader = serde_json::from_value(c.header)
        .map_err(|e| Error::Format(format!("state header: {}", e)))?;
    let mut tensors = IndexMap::new();
    for (name, t) in &c.tensors {
        tensors.insert(name.clone(), Rc::new(t.to_mat()?));
    }
    Ok((
        TuningState {
            method: TuneMethod::parse(&header.method)?,
            task: header.task,
            base_fingerprint: header.base_fingerprint,
            prompt_count: header.prompt_count,
            option_count: header.option_count,
            adapter_rank: header.adapter_rank,
            tensors,
        },
        fp,
    ))
}

/// Load a state and insist it was trained against this exact base.
pub fn load_state_for(path: &Path, base_fingerprint: &str) -> Result<(TuningState<f32>, String)> {
    let (state, fp) = load_state(path)?;
    if state.base_fingerprint != base_fingerprint {
        return Err(Error::Contract(format!(
            "tuning state was trained on base {} but this base is {}",
            &state.base_fingerprint[..state.base_fingerprint.len().min(12)],
            &base_fingerprint[..base_fingerprint.len().min(12)]
        )));
    }
    Ok((state, fp))
}
