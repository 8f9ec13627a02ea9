use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_params, ModelConfig, NestModel};
use crate::binio::{to_u32, Reader, Writer};
use crate::datakit::Normalizer;
use crate::error::{NestError, Result};
use crate::numcore::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NESTCK1\0";

/// JSON header stored at the front of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    /// Statistics the model's inputs were normalised with, if any.
    pub normalizer: Option<Normalizer>,
}

/// `magic | u32 len | manifest JSON | u32 count | per tensor (u32 name len, name,
/// u32 ndim, u32 dims…, f64 data…) | fnv1a64`, tensors in store order.
pub fn write_checkpoint(manifest: &CheckpointManifest, params: &ParamStore) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest)?;
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    w.u32(to_u32(json.len(), "manifest length")?).bytes(&json);
    w.u32(to_u32(params.len(), "tensor count")?);
    for (name, t) in params.iter() {
        w.u32(to_u32(name.len(), "name length")?).bytes(name.as_bytes());
        w.u32(to_u32(t.shape().len(), "rank")?);
        for &d in t.shape() {
            w.u32(to_u32(d, "extent")?);
        }
        w.f64s(t.data());
    }
    Ok(w.finish())
}

/// Parses a checkpoint and checks its tensors against the layout its config implies.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(CheckpointManifest, ParamStore)> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC)?;
    let len = r.u32()? as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(r.bytes(len)?)?;
    manifest.config.validate()?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.bytes(nlen)?)
            .map_err(|_| NestError::Malformed("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| NestError::Malformed(format!("tensor {name} is too large")))?;
        let data = r.f64s(n)?;
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    r.finish()?;
    let expected = init_params(&manifest.config, 0)?;
    let layout_ok = expected.len() == params.len()
        && expected
            .iter()
            .zip(params.iter())
            .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
    if !layout_ok {
        return Err(NestError::Malformed("tensor layout does not match the stored config".into()));
    }
    Ok((manifest, params))
}

pub fn save_checkpoint(manifest: &CheckpointManifest, params: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_checkpoint(manifest, params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointManifest, ParamStore)> {
    read_checkpoint(&fs::read(path)?)
}

impl NestModel {
    pub fn from_checkpoint(manifest: &CheckpointManifest, params: ParamStore) -> Self {
        Self {
            config: manifest.config.clone(),
            params,
        }
    }
}
