use std::fs;
use std::path::Path;

use super::RegionModel;
use crate::binio::{to_u32, Reader, Writer};
use crate::error::{NestError, Result};

pub const REGION_MAGIC: &[u8; 8] = b"NESTRG1\0";

/// `magic | u32 N, M, chunks | f64 sigma | u64 seed | u32 width | u32 region per node | f64 prototypes | fnv1a64`.
pub fn write_region_model(model: &RegionModel) -> Result<Vec<u8>> {
    let mut w = Writer::new(REGION_MAGIC);
    w.u32(to_u32(model.n_nodes, "N")?)
        .u32(to_u32(model.n_regions, "M")?)
        .u32(to_u32(model.chunks, "chunks")?)
        .f64(model.sigma)
        .u64(model.seed)
        .u32(to_u32(model.proto_width, "prototype width")?);
    for &a in &model.assignment {
        w.u32(to_u32(a, "region index")?);
    }
    w.f64s(&model.prototypes);
    Ok(w.finish())
}

pub fn read_region_model(bytes: &[u8]) -> Result<RegionModel> {
    let mut r = Reader::open(bytes, REGION_MAGIC)?;
    let n = r.u32()? as usize;
    let m = r.u32()? as usize;
    let chunks = r.u32()? as usize;
    let sigma = r.f64()?;
    let seed = r.u64()?;
    let width = r.u32()? as usize;
    let assignment = (0..n).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let prototypes = r.f64s(m * width)?;
    r.finish()?;
    if assignment.iter().any(|&a| a >= m) {
        return Err(NestError::Malformed("region index out of range".into()));
    }
    Ok(RegionModel {
        n_nodes: n,
        n_regions: m,
        chunks,
        sigma,
        seed,
        assignment,
        prototypes,
        proto_width: width,
        embedding: None,
    })
}

pub fn save_region_model(model: &RegionModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_region_model(model)?)?;
    Ok(())
}

pub fn load_region_model(path: impl AsRef<Path>) -> Result<RegionModel> {
    read_region_model(&fs::read(path)?)
}
