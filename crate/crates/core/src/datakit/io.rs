use std::fs;
use std::path::Path;

use super::SeriesTensor;
use crate::binio::{to_u32, Reader, Writer};
use crate::error::{NestError, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"NESTDS1\0";

const HEADER_BYTES: usize = 8 + 5 * 4;

/// Exact on-disk size of an `N × T × C` dataset.
pub fn dataset_file_size(n: usize, t: usize, c: usize) -> usize {
    HEADER_BYTES + 8 * n * t * c + 8
}

/// Serialises as `magic | u32 N, T, C, steps_per_day, start_offset | f64 values | fnv1a64`.
pub fn write_dataset(data: &SeriesTensor) -> Result<Vec<u8>> {
    let mut w = Writer::new(DATASET_MAGIC);
    w.u32(to_u32(data.nodes(), "N")?)
        .u32(to_u32(data.steps(), "T")?)
        .u32(to_u32(data.channels(), "C")?)
        .u32(to_u32(data.steps_per_day, "steps_per_day")?)
        .u32(to_u32(data.start_offset, "start_offset")?)
        .f64s(data.values());
    Ok(w.finish())
}

pub fn read_dataset(bytes: &[u8]) -> Result<SeriesTensor> {
    let mut r = Reader::open(bytes, DATASET_MAGIC)?;
    let n = r.u32()? as usize;
    let t = r.u32()? as usize;
    let c = r.u32()? as usize;
    let spd = r.u32()? as usize;
    let start = r.u32()? as usize;
    let expected = dataset_file_size(n, t, c);
    if bytes.len() != expected {
        return Err(if bytes.len() < expected {
            NestError::Truncated {
                needed: expected,
                found: bytes.len(),
            }
        } else {
            NestError::Malformed(format!("dataset is {} bytes, header implies {expected}", bytes.len()))
        });
    }
    let values = r.f64s(n * t * c)?;
    r.finish()?;
    SeriesTensor::new(n, t, c, values, spd, start).map_err(|e| NestError::Malformed(e.to_string()))
}

pub fn save_dataset(data: &SeriesTensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_dataset(data)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SeriesTensor> {
    read_dataset(&fs::read(path)?)
}
