//! Versioned binary checkpoint container.
//!
//! Layout: magic, format version, a JSON header (dtype, config echo, tensor
//! index, free-form metadata), then raw little-endian tensor data in index
//! order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"TSCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: serde_json::Value,
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: String,
    shape: Vec<usize>,
}

/// In-memory checkpoint: named tensors plus the config that produced them.
pub struct Checkpoint<T: Scalar> {
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, String, ArrayD<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config: serde_json::Value, meta: serde_json::Value) -> Self {
        Checkpoint {
            config,
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, kind: &str, data: ArrayD<T>) {
        self.tensors.push((name.into(), kind.to_string(), data));
    }

    pub fn get(&self, name: &str, kind: &str) -> Option<&ArrayD<T>> {
        self.tensors
            .iter()
            .find(|(n, k, _)| n == name && k == kind)
            .map(|(_, _, d)| d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let header = Header {
            dtype: T::DTYPE.to_string(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            entries: self
                .tensors
                .iter()
                .map(|(name, kind, data)| Entry {
                    name: name.clone(),
                    kind: kind.clone(),
                    shape: data.shape().to_vec(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        let mut buf = Vec::new();
        for (_, _, data) in &self.tensors {
            buf.clear();
            buf.reserve(data.len() * T::BYTE_WIDTH);
            for &v in data.iter() {
                v.to_le_bytes(&mut buf);
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut ver = [0u8; 4];
        r.read_exact(&mut ver)?;
        let version = u32::from_le_bytes(ver);
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "dtype mismatch: checkpoint {} vs requested {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let mut tensors = Vec::with_capacity(header.entries.len());
        for e in &header.entries {
            let n: usize = e.shape.iter().product();
            let mut raw = vec![0u8; n * T::BYTE_WIDTH];
            r.read_exact(&mut raw)?;
            let data: Vec<T> = raw
                .chunks_exact(T::BYTE_WIDTH)
                .map(T::from_le_slice)
                .collect();
            tensors.push((
                e.name.clone(),
                e.kind.clone(),
                ArrayD::from_shape_vec(IxDyn(&e.shape), data)
                    .map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?,
            ));
        }
        Ok(Checkpoint {
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = std::env::temp_dir().join("textspot_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ckpt");
        let mut ck = Checkpoint::<f64>::new(
            serde_json::json!({"lr": 1e-4}),
            serde_json::json!({"step": 7}),
        );
        ck.push(
            "w",
            "param",
            ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, -2.0, 3.5, 0.25]).unwrap(),
        );
        ck.save(&path).unwrap();
        let back = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(back.meta["step"], 7);
        assert_eq!(back.get("w", "param").unwrap(), ck.get("w", "param").unwrap());
        // wrong dtype is rejected
        assert!(Checkpoint::<f32>::load(&path).is_err());
    }
}
