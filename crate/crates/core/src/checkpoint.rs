//! Named-tensor checkpoint container.
//!
//! Layout: magic `PAOC` | version u32 LE | json_len u32 LE | JSON manifest
//! `{"tensors": [{"name", "shape"}...], "meta": {...}}` | little-endian f32
//! payloads in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{f32s_from_le, parse_header};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PAOC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<Tensor>,
    /// Free-form metadata (configs, counters, schedule).
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            tensors: Vec::new(),
            meta,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "tensor {name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(Error::InvalidInput(format!("duplicate tensor {name}")));
        }
        self.tensors.push(Tensor { name, shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Metadata(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let floats: usize = self.tensors.iter().map(|t| t.data.len()).sum();
        let mut buf = Vec::with_capacity(12 + json.len() + 4 * floats);
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for t in &self.tensors {
            for x in &t.data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (json, offset) = parse_header(bytes, MAGIC, VERSION)?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        let floats: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let expected = offset + 4 * floats;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::Metadata(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - expected
            )));
        }
        let mut at = offset;
        let tensors = manifest
            .tensors
            .into_iter()
            .map(|e| {
                let len: usize = e.shape.iter().product();
                let data = f32s_from_le(&bytes[at..at + 4 * len]);
                at += 4 * len;
                Tensor {
                    name: e.name,
                    shape: e.shape,
                    data,
                }
            })
            .collect();
        Ok(Self {
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({"step": 3}));
        c.push("w", vec![2, 3], vec![1.0, -2.0, f32::MIN_POSITIVE, 4.5, 0.0, -0.0]).unwrap();
        c.push("b", vec![3], vec![0.25, 0.5, 0.75]).unwrap();
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let d = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(d.meta, c.meta);
        for (a, b) in c.tensors.iter().zip(&d.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let bits = |t: &Tensor| t.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn load_errors_are_distinct() {
        let bytes = sample().encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::BadMagic { .. })));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(Checkpoint::decode(&ver), Err(Error::VersionMismatch { .. })));
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        // A dataset header is not a checkpoint.
        let mut other = bytes;
        other[..4].copy_from_slice(b"PAOD");
        assert!(matches!(Checkpoint::decode(&other), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn shape_and_name_checks() {
        let mut c = sample();
        assert!(c.push("x", vec![2, 2], vec![0.0; 3]).is_err());
        assert!(c.push("w", vec![1], vec![0.0]).is_err());
        assert!(c.get("missing").is_err());
        assert_eq!(c.get("b").unwrap().data, vec![0.25, 0.5, 0.75]);
    }
}
