//! Checkpoint files.
//!
//! ```text
//! u64 LE manifest length | manifest (UTF-8 JSON) | float32 LE data
//! ```
//!
//! The manifest lists every array as `{name, shape, offset}` with `offset`
//! in bytes from the start of the data section, plus free-form metadata.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub arrays: Vec<Entry>,
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub arrays: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str, device: &Device) -> Result<Tensor> {
        let (shape, data) = self
            .arrays
            .get(name)
            .ok_or_else(|| Error::Missing(format!("array {name} in checkpoint")))?;
        Ok(Tensor::from_slice(data, shape.as_slice(), device)?)
    }
}

/// Serialises named tensors (converted to float32) under `meta`.
pub fn encode(meta: &serde_json::Value, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut arrays = Vec::with_capacity(tensors.len());
    let mut data = Vec::new();
    for (name, t) in tensors {
        arrays.push(Entry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            offset: data.len(),
        });
        for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&Manifest {
        arrays,
        meta: meta.clone(),
    })
    .map_err(|e| Error::format(None, e.to_string()))?;
    let mut out = Vec::with_capacity(8 + manifest.len() + data.len());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::format(None, "checkpoint shorter than its length prefix"));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(8..8usize.saturating_add(len))
        .ok_or_else(|| Error::format(None, "manifest truncated"))?;
    let manifest: Manifest =
        serde_json::from_slice(body).map_err(|e| Error::format(None, format!("manifest: {e}")))?;
    let data = &bytes[8 + len..];
    let mut arrays = BTreeMap::new();
    for (i, e) in manifest.arrays.iter().enumerate() {
        let n: usize = e.shape.iter().product();
        let chunk = data
            .get(e.offset..e.offset + 4 * n)
            .ok_or_else(|| Error::format(Some(i), format!("array {} truncated", e.name)))?;
        let values = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if arrays.insert(e.name.clone(), (e.shape.clone(), values)).is_some() {
            return Err(Error::format(Some(i), format!("duplicate array {}", e.name)));
        }
    }
    Ok(Checkpoint {
        meta: manifest.meta,
        arrays,
    })
}

pub fn write(path: &Path, meta: &serde_json::Value, tensors: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(meta, tensors)?;
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let a = Tensor::arange(0f32, 6.0, &Device::Cpu).unwrap().reshape((2, 3)).unwrap();
        let b = Tensor::new(&[1.5f32], &Device::Cpu).unwrap();
        let meta = serde_json::json!({"step": 3});
        let bytes = encode(&meta, &[("a".into(), a), ("b".into(), b)]).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.arrays["a"], (vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        assert_eq!(ck.arrays["b"].1, vec![1.5]);
        assert!(decode(&bytes[..bytes.len() - 2]).is_err());
    }
}
