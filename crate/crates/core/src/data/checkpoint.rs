//! Self-describing binary tensor container and model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TADC" | u32 version | u32 meta_len | meta JSON (UTF-8)
//! u32 n_tensors | { u16 name_len | name | u8 dtype | u8 rank | u32 dims.. | f32 data.. }*
//! ```
//!
//! Save/load round-trips are bit-identical; loading validates the magic,
//! version, and (for model checkpoints) the architecture snapshot.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::image_io::atomic_write;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TADC";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Stage::Stage1 => write!(f, "stage1"),
            Stage::Stage2 => write!(f, "stage2"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub config: ModelConfig,
    pub seed: u64,
}

/// Serialize named tensors with a JSON meta document.
pub fn save_tensors(
    path: &Path,
    meta: &serde_json::Value,
    tensors: &[(String, Tensor)],
) -> Result<()> {
    let meta_bytes = serde_json::to_vec(meta)
        .map_err(|e| Error::Checkpoint(format!("meta serialization failed: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    atomic_write(path, &out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let slice = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint file".into()))?;
        self.pos += n;
        Ok(slice)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

/// Read back a container written by [`save_tensors`].
pub fn load_tensors(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic (not a TADC container)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported container version {version} (expected {VERSION})"
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta: serde_json::Value = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad meta JSON: {e}")))?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("unsupported dtype {dtype}")));
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok((meta, tensors))
}

pub fn save_checkpoint(params: &ModelParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let meta_json = serde_json::to_value(meta)
        .map_err(|e| Error::Checkpoint(format!("meta serialization failed: {e}")))?;
    save_tensors(path, &meta_json, &params.named())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let (meta_json, tensors) = load_tensors(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta_json)
        .map_err(|e| Error::Checkpoint(format!("bad checkpoint meta: {e}")))?;
    meta.config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("checkpoint carries invalid config: {e}")))?;
    let map: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let params = params_from_named(&meta.config, &map)?;
    Ok((params, meta))
}

/// Rebuild a parameter struct from named tensors, validating that the set
/// of names and every shape matches the architecture exactly.
fn params_from_named(config: &ModelConfig, map: &BTreeMap<String, Tensor>) -> Result<ModelParams> {
    let mut params = ModelParams::init(config, 0)?;
    let mut expected = Vec::new();
    params.for_each(|name, t| expected.push((name.to_string(), t.shape().to_vec())));
    if expected.len() != map.len() {
        let have: Vec<&String> = map.keys().collect();
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: expected {} tensors, file has {} ({have:?})",
            expected.len(),
            map.len()
        )));
    }
    for (name, shape) in &expected {
        let t = map.get(name).ok_or_else(|| {
            Error::Checkpoint(format!("missing tensor '{name}' in checkpoint"))
        })?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {:?}, architecture wants {shape:?}",
                t.shape()
            )));
        }
    }
    let mut names = Vec::new();
    params.for_each(|name, _| names.push(name.to_string()));
    for name in names {
        let t = map.get(&name).expect("validated above").clone();
        set_by_name(&mut params, &name, t);
    }
    Ok(params)
}

fn set_by_name(params: &mut ModelParams, name: &str, value: Tensor) {
    use crate::model::{BlockParams, LinearParams};
    fn linear_slot<'a>(l: &'a mut LinearParams, field: &str) -> &'a mut Tensor {
        match field {
            "weight" => &mut l.weight,
            "bias" => &mut l.bias,
            other => panic!("unknown linear field {other}"),
        }
    }
    fn block_slot<'a>(b: &'a mut BlockParams, rest: &[&str]) -> &'a mut Tensor {
        match rest {
            ["norm1", "gamma"] => &mut b.norm1.gamma,
            ["norm1", "beta"] => &mut b.norm1.beta,
            ["norm2", "gamma"] => &mut b.norm2.gamma,
            ["norm2", "beta"] => &mut b.norm2.beta,
            ["attn", "q", f] => linear_slot(&mut b.attn.query, f),
            ["attn", "k", f] => linear_slot(&mut b.attn.key, f),
            ["attn", "v", f] => linear_slot(&mut b.attn.value, f),
            ["attn", "o", f] => linear_slot(&mut b.attn.proj, f),
            ["mlp", "fc1", f] => linear_slot(&mut b.mlp_fc1, f),
            ["mlp", "fc2", f] => linear_slot(&mut b.mlp_fc2, f),
            other => panic!("unknown block field {other:?}"),
        }
    }
    let parts: Vec<&str> = name.split('.').collect();
    let slot: &mut Tensor = match parts.as_slice() {
        ["enc", "patch_embed", f] => linear_slot(&mut params.patch_embed, f),
        ["enc", "pos"] => &mut params.enc_pos,
        ["enc", "norm", "gamma"] => &mut params.enc_norm.gamma,
        ["enc", "norm", "beta"] => &mut params.enc_norm.beta,
        ["dec", "embed", f] => linear_slot(&mut params.dec_embed, f),
        ["dec", "mask_token"] => &mut params.mask_token,
        ["dec", "pos"] => &mut params.dec_pos,
        ["dec", "norm", "gamma"] => &mut params.dec_norm.gamma,
        ["dec", "norm", "beta"] => &mut params.dec_norm.beta,
        ["head_r", f] => linear_slot(&mut params.head_recon, f),
        ["head_m", f] => linear_slot(&mut params.head_classify, f),
        ["enc", block, rest @ ..] if block.starts_with("block") => {
            let idx: usize = block["block".len()..].parse().expect("block index");
            block_slot(&mut params.enc_blocks[idx], rest)
        }
        ["dec", block, rest @ ..] if block.starts_with("block") => {
            let idx: usize = block["block".len()..].parse().expect("block index");
            block_slot(&mut params.dec_blocks[idx], rest)
        }
        other => panic!("unknown parameter name {other:?}"),
    };
    *slot = value;
}
