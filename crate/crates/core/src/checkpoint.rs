//! Checkpoint container.
//!
//! Layout: one line of JSON (the manifest) terminated by `\n`, followed by the
//! concatenated little-endian `f64` blobs of every tensor. Each manifest entry
//! records `{name, shape, dtype: "f64", byte_offset}` with offsets relative to
//! the first blob byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CgsError, Result};
use crate::tensor::Tensor;

const FORMAT: &str = "cgs-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<Entry>,
}

/// Named tensors plus scalar metadata (hyperparameters).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CgsError::Validation(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn meta_value(&self, key: &str) -> Result<&serde_json::Value> {
        self.meta
            .get(key)
            .ok_or_else(|| CgsError::Validation(format!("checkpoint has no meta key {key:?}")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta_value(key)?
            .as_f64()
            .ok_or_else(|| CgsError::Validation(format!("meta {key:?} is not a number")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta_value(key)?
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| CgsError::Validation(format!("meta {key:?} is not an integer")))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta_value(key)?
            .as_str()
            .ok_or_else(|| CgsError::Validation(format!("meta {key:?} is not a string")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                byte_offset: offset,
            });
            offset += 8 * t.len() as u64;
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            meta: self.meta.clone(),
            tensors: entries,
        };
        let mut out = serde_json::to_vec(&manifest)
            .map_err(|e| CgsError::State(format!("manifest encoding: {e}")))?;
        out.push(b'\n');
        out.reserve(offset as usize);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CgsError::Parse {
                line: 1,
                message: "missing manifest terminator".into(),
            })?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..split]).map_err(|e| CgsError::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(CgsError::Validation(format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            )));
        }
        let blob = &bytes[split + 1..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f64" {
                return Err(CgsError::Validation(format!("tensor {} has dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.byte_offset as usize;
            let end = start + 8 * n;
            let raw = blob.get(start..end).ok_or_else(|| {
                CgsError::Validation(format!("tensor {} runs past end of file", e.name))
            })?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((e.name, Tensor::new(&e.shape, data)?));
        }
        Ok(Checkpoint {
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| CgsError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| CgsError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bit_exact_round_trip(
            a in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 0..40),
            rows in 1usize..4,
        ) {
            let n = a.len() / rows * rows;
            let t = Tensor::new(&[rows, n / rows], a[..n].to_vec()).unwrap();
            let mut ck = Checkpoint::default();
            ck.meta.insert("solver.gamma".into(), serde_json::json!(0.5));
            ck.tensors.push(("encoder.layer0.edge.W0".into(), t));
            ck.tensors.push(("decoder.b0".into(), Tensor::scalar(-0.0)));
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            for ((n1, t1), (n2, t2)) in ck.tensors.iter().zip(&back.tensors) {
                prop_assert_eq!(n1, n2);
                let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
            prop_assert_eq!(back.meta, ck.meta);
        }
    }

    #[test]
    fn truncated_blob_rejected() {
        let mut ck = Checkpoint::default();
        ck.tensors.push(("w".into(), Tensor::ones(&[3])));
        let mut bytes = ck.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
