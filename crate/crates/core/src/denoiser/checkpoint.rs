//! Binary checkpoint container.
//!
//! Layout (little-endian): `b"FTCK"`, version `u32`, metadata length `u32`,
//! metadata JSON, tensor count `u32`, then per tensor: name length `u32`,
//! UTF-8 name, rank `u32`, dims `u32 x rank`, `f32` payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

use super::params::{DenoiserConfig, DenoiserParams};

const MAGIC: &[u8; 4] = b"FTCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: DenoiserConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Serialize parameters plus free-form metadata (for example the head field
/// specification) into checkpoint bytes.
pub fn encode_checkpoint<T: Real>(params: &DenoiserParams<T>, extra: &serde_json::Value) -> Vec<u8> {
    let meta = serde_json::to_vec(&Meta {
        config: params.config.clone(),
        extra: extra.clone(),
    })
    .expect("metadata serializes");
    let tensors = params.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, meta.len() as u32);
    out.extend_from_slice(&meta);
    put_u32(&mut out, tensors.len() as u32);
    for (name, shape, data) in tensors {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, shape.len() as u32);
        for d in shape {
            put_u32(&mut out, d as u32);
        }
        for v in data {
            out.extend_from_slice(&v.to_f32_bits().to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> std::result::Result<(DenoiserParams<T>, serde_json::Value), String> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| "truncated header")?;
    if &magic != MAGIC {
        return Err("bad magic".into());
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let meta_len = get_u32(&mut r)? as usize;
    if r.len() < meta_len {
        return Err("truncated metadata".into());
    }
    let meta: Meta = serde_json::from_slice(&r[..meta_len]).map_err(|e| format!("metadata: {e}"))?;
    r = &r[meta_len..];
    meta.config.validate().map_err(|e| e.to_string())?;
    let mut params = DenoiserParams::<T>::zeros(meta.config);
    let expected: Vec<(String, Vec<usize>)> = params
        .tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    let count = get_u32(&mut r)? as usize;
    if count != expected.len() {
        return Err(format!("expected {} tensors, found {count}", expected.len()));
    }
    for ((name, shape), dst) in expected.iter().zip(params.tensors_mut()) {
        let len = get_u32(&mut r)? as usize;
        if r.len() < len {
            return Err("truncated tensor name".into());
        }
        let found = std::str::from_utf8(&r[..len]).map_err(|_| "tensor name is not UTF-8")?;
        if found != name {
            return Err(format!("expected tensor {name}, found {found}"));
        }
        r = &r[len..];
        let rank = get_u32(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| get_u32(&mut r).map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if &dims != shape {
            return Err(format!("tensor {name} has shape {dims:?}, expected {shape:?}"));
        }
        for v in dst.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| format!("truncated data in {name}"))?;
            *v = T::lit(f32::from_le_bytes(b) as f64);
        }
    }
    if !r.is_empty() {
        return Err(format!("{} trailing bytes", r.len()));
    }
    Ok((params, meta.extra))
}

pub fn save_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    params: &DenoiserParams<T>,
    extra: &serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, extra);
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<(DenoiserParams<T>, serde_json::Value)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|reason| Error::format(path, reason))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn get_u32(r: &mut &[u8]) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| "truncated integer")?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact_for_f32() {
        let p = DenoiserParams::<f32>::init(DenoiserConfig::tiny(1, 8), 4).unwrap();
        let extra = serde_json::json!({"field": {"seed": 3}});
        let bytes = encode_checkpoint(&p, &extra);
        let (q, e) = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(p, q);
        assert_eq!(e, extra);
    }

    #[test]
    fn rejects_corruption() {
        let p = DenoiserParams::<f32>::init(DenoiserConfig::tiny(1, 8), 4).unwrap();
        let bytes = encode_checkpoint(&p, &serde_json::Value::Null);
        assert!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint::<f32>(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_checkpoint::<f32>(&long).is_err());
    }
}
