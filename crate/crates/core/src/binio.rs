//! Little-endian framing shared by the dataset, region and checkpoint files.
//!
//! Every file is `magic (8 bytes) | body | fnv1a64(magic | body) (8 bytes)`.

use std::fs;
use std::path::Path;

use crate::error::{NestError, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 8]) -> Self {
        Self { buf: magic.to_vec() }
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    /// Appends the checksum and returns the finished file image.
    pub fn finish(mut self) -> Vec<u8> {
        let sum = fnv1a64(&self.buf);
        self.buf.extend_from_slice(&sum.to_le_bytes());
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        fs::write(path, self.finish())?;
        Ok(())
    }
}

pub fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| NestError::InvalidArgument(format!("{what} = {v} does not fit in u32")))
}

#[derive(Debug)]
pub struct Reader<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validates magic, length and checksum, in that order, then positions after the magic.
    pub fn open(bytes: &'a [u8], magic: &[u8; 8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != magic {
            let n = bytes.len().min(8);
            return Err(NestError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(&bytes[..n]).into_owned(),
            });
        }
        if bytes.len() < 16 {
            return Err(NestError::Truncated {
                needed: 16,
                found: bytes.len(),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let computed = fnv1a64(body);
        if stored != computed {
            return Err(NestError::ChecksumMismatch { stored, computed });
        }
        Ok(Self { body, pos: 8 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.body.len() {
            return Err(NestError::Truncated {
                needed: self.pos + n + 8,
                found: self.body.len() + 8,
            });
        }
        let s = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| NestError::Malformed("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    /// Errors if unread bytes remain before the checksum.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.body.len() {
            return Err(NestError::Malformed(format!(
                "{} trailing bytes before checksum",
                self.body.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn distinct_errors() {
        let mut w = Writer::new(b"TESTMAG\0");
        w.u32(7).f64(1.5);
        let img = w.finish();
        let mut r = Reader::open(&img, b"TESTMAG\0").unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.f64().unwrap(), 1.5);
        r.finish().unwrap();

        assert!(matches!(Reader::open(&img, b"OTHERMG\0"), Err(NestError::BadMagic { .. })));
        let mut flipped = img.clone();
        flipped[9] ^= 1;
        assert!(matches!(Reader::open(&flipped, b"TESTMAG\0"), Err(NestError::ChecksumMismatch { .. })));
        assert!(matches!(Reader::open(&img[..12], b"TESTMAG\0"), Err(NestError::Truncated { .. })));
    }
}
