//! Binary expression-sequence files.
//!
//! Layout (little-endian): `b"FTSQ"`, version `u32`, frame count `u32`,
//! code width `u32`, frame rate `f32`, then `N x dim` `f32` values row-major.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::condstream::EXPRESSION_FPS;
use crate::error::{Error, Result};
use crate::scalar::Real;

const MAGIC: &[u8; 4] = b"FTSQ";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFile<T> {
    pub codes: Array2<T>,
    pub fps: f32,
}

impl<T: Real> SequenceFile<T> {
    pub fn new(codes: Array2<T>) -> Self {
        Self {
            codes,
            fps: EXPRESSION_FPS as f32,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let (n, dim) = self.codes.dim();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * dim);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        out.extend_from_slice(&self.fps.to_le_bytes());
        for v in self.codes.iter() {
            out.extend_from_slice(&v.to_f32_bits().to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < HEADER_LEN {
            return Err("truncated header".into());
        }
        if &bytes[..4] != MAGIC {
            return Err("bad magic".into());
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let (n, dim) = (word(8) as usize, word(12) as usize);
        let fps = f32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != 4 * n * dim {
            return Err(format!(
                "payload has {} bytes, header implies {}",
                payload.len(),
                4 * n * dim
            ));
        }
        let values: Vec<T> = payload
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        let codes = Array2::from_shape_vec((n, dim), values).map_err(|e| e.to_string())?;
        Ok(Self { codes, fps })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|r| Error::format(path, r))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_roundtrip() {
        let codes = Array2::from_shape_fn((3, 200), |(i, j)| (i as f32 - j as f32) * 0.01);
        let f = SequenceFile::new(codes);
        let bytes = f.encode();
        assert_eq!(bytes.len(), 20 + 3 * 200 * 4);
        let g = SequenceFile::<f32>::decode(&bytes).unwrap();
        assert_eq!(g, f);
        assert_eq!(g.encode(), bytes);
    }

    #[test]
    fn rejects_bad_files() {
        let f = SequenceFile::new(Array2::<f32>::zeros((2, 200)));
        let bytes = f.encode();
        assert!(SequenceFile::<f32>::decode(&bytes[..bytes.len() - 4]).is_err());
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(SequenceFile::<f32>::decode(&bad).is_err());
        let mut ver = bytes;
        ver[4] = 9;
        assert!(SequenceFile::<f32>::decode(&ver).is_err());
    }
}
