//! Model and adapter checkpoints.
//!
//! Layout: magic `LOOPFILL`, `u32` version, `u32` payload length of a JSON
//! header (kind, config, tensor table), then every tensor as little-endian
//! `f32` in declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use loopfill_core::model::{Denoiser, DenoiserConfig, LoraAdapters, ParamStore};
use loopfill_core::Error as CoreError;

use crate::error::{IoContext, PipelineError, Result};

pub const MAGIC: &[u8; 8] = b"LOOPFILL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Header {
    Base {
        config: DenoiserConfig,
        tensors: Vec<TensorInfo>,
    },
    Adapters {
        rank: usize,
        scale: f64,
        base_config: DenoiserConfig,
        base_fingerprint: String,
        tensors: Vec<TensorInfo>,
    },
}

fn table(store: &ParamStore) -> Vec<TensorInfo> {
    store.tensors().iter().map(|t| TensorInfo { name: t.name.clone(), shape: t.shape.clone() }).collect()
}

fn encode(header: &Header, store: &ParamStore) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + store.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in store.flatten() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn encode_base(model: &Denoiser) -> Vec<u8> {
    encode(&Header::Base { config: *model.config(), tensors: table(model.params()) }, model.params())
}

pub fn encode_adapters(adapters: &LoraAdapters, base: &Denoiser) -> Vec<u8> {
    let header = Header::Adapters {
        rank: adapters.rank,
        scale: adapters.scale,
        base_config: *base.config(),
        base_fingerprint: hex::encode(adapters.base_fingerprint),
        tensors: table(adapters.params()),
    };
    encode(&header, adapters.params())
}

/// Splits a checkpoint into its header and values.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Header, Vec<f64>)> {
    let bad = |m: String| PipelineError::format(path, m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a loopfill checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(PipelineError::Core(CoreError::Compatibility(format!(
            "checkpoint version {version}, this build reads {VERSION}"
        ))));
    }
    let json_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + json_len).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("bad header: {e}")))?;
    let tensors = match &header {
        Header::Base { tensors, .. } | Header::Adapters { tensors, .. } => tensors,
    };
    let count: usize = tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let body = &bytes[16 + json_len..];
    if body.len() != count * 4 {
        return Err(bad(format!("expected {} tensor bytes, found {}", count * 4, body.len())));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok((header, values))
}

fn check_table(expected: &ParamStore, found: &[TensorInfo]) -> Result<()> {
    if table(expected) != found {
        return Err(PipelineError::Core(CoreError::Compatibility("tensor table differs from this configuration".into())));
    }
    Ok(())
}

pub fn decode_base(bytes: &[u8], path: &Path) -> Result<Denoiser> {
    match decode(bytes, path)? {
        (Header::Base { config, tensors }, values) => {
            let model = Denoiser::from_flat(config, &values)?;
            check_table(model.params(), &tensors)?;
            Ok(model)
        }
        _ => Err(PipelineError::format(path, "expected a base checkpoint, found adapters")),
    }
}

/// Loads adapters, refusing ones trained for a different base layout.
pub fn decode_adapters(bytes: &[u8], path: &Path, base: &Denoiser) -> Result<LoraAdapters> {
    match decode(bytes, path)? {
        (Header::Adapters { rank, scale, base_config, base_fingerprint, tensors }, values) => {
            let want = hex::encode(base.config().fingerprint());
            if base_fingerprint != want || base_config != *base.config() {
                return Err(PipelineError::Core(CoreError::Compatibility(format!(
                    "adapters expect base {base_fingerprint}, loaded base is {want}"
                ))));
            }
            let adapters = LoraAdapters::from_flat(base, rank, scale, &values)?;
            check_table(adapters.params(), &tensors)?;
            Ok(adapters)
        }
        _ => Err(PipelineError::format(path, "expected an adapter checkpoint, found a base model")),
    }
}

pub fn save_base(model: &Denoiser, path: &Path) -> Result<()> {
    fs::write(path, encode_base(model)).at(path)
}

pub fn load_base(path: &Path) -> Result<Denoiser> {
    decode_base(&fs::read(path).at(path)?, path)
}

pub fn save_adapters(adapters: &LoraAdapters, base: &Denoiser, path: &Path) -> Result<()> {
    fs::write(path, encode_adapters(adapters, base)).at(path)
}

pub fn load_adapters(path: &Path, base: &Denoiser) -> Result<LoraAdapters> {
    decode_adapters(&fs::read(path).at(path)?, path, base)
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path).at(path)?)))
}
