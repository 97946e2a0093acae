//! Binary checkpoints of a parameter store plus a JSON manifest.
//!
//! Layout: `"PEELCKPT"`, u32 version, u32 manifest length, the manifest
//! JSON, then every tensor's values as little-endian f32 in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tensor};
use crate::bytes::{put_f32s, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::policy::Policy;

const MAGIC: &[u8; 8] = b"PEELCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_store(meta: serde_json::Value, store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let manifest = Manifest {
        meta,
        tensors: store
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * store.iter().map(|(_, p)| p.value.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    for (_, p) in store.iter() {
        put_f32s(&mut out, p.value.data());
    }
    Ok(out)
}

pub fn decode_store(bytes: &[u8]) -> Result<(serde_json::Value, ParamStore<f32>)> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 8,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let len = r.u32("manifest length")? as usize;
    let json = r.take(len, "manifest")?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::Parse {
        offset: 16,
        message: format!("manifest: {e}"),
    })?;
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        let data = r.f32s(n, &format!("tensor {}", t.name))?;
        let value = Tensor::new(t.shape.clone(), data).map_err(|e| r.error(format!("tensor {}: {e}", t.name)))?;
        store.add(t.name.clone(), value, t.trainable);
    }
    r.finish()?;
    Ok((manifest.meta, store))
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    policy: Policy,
    k: usize,
    seed: u64,
}

pub fn encode_policy(policy: &Policy, store: &ParamStore<f32>, seed: u64) -> Result<Vec<u8>> {
    let meta = serde_json::to_value(PolicyMeta {
        policy: policy.clone(),
        k: policy.library.k(),
        seed,
    })?;
    encode_store(meta, store)
}

/// Policy structure, parameters and the seed it was saved with.
pub fn decode_policy(bytes: &[u8]) -> Result<(Policy, ParamStore<f32>, u64)> {
    let (meta, store) = decode_store(bytes)?;
    let meta: PolicyMeta = serde_json::from_value(meta).map_err(|e| Error::Parse {
        offset: 16,
        message: format!("policy manifest: {e}"),
    })?;
    let max_id = meta
        .policy
        .base_params()
        .into_iter()
        .chain(meta.policy.library.layers.iter().flat_map(|l| l.experts.iter().flat_map(|e| e.params())))
        .chain(meta.policy.router.iter().flat_map(|r| r.params()))
        .map(|p| p.0)
        .max()
        .unwrap_or(0);
    if max_id >= store.len() || meta.k != meta.policy.library.k() {
        return Err(Error::Parse {
            offset: 16,
            message: "manifest references parameters that are not stored".into(),
        });
    }
    Ok((meta.policy, store, meta.seed))
}

pub fn save_policy(path: &Path, policy: &Policy, store: &ParamStore<f32>, seed: u64) -> Result<()> {
    std::fs::write(path, encode_policy(policy, store, seed)?).map_err(|e| Error::io(path, e))
}

pub fn load_policy(path: &Path) -> Result<(Policy, ParamStore<f32>, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_policy(&bytes)
}
