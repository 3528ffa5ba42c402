//! Checkpoint container: named arrays plus a JSON manifest.
//!
//! Layout: `DALICKPT`, `u32` version, `u64` manifest length, the manifest
//! JSON, then the concatenated little-endian array payloads in manifest order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DaliError, Result};
use crate::nn::{Adam, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"DALICKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// In-memory checkpoint.
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    entries: Vec<ArrayEntry>,
    index: HashMap<String, usize>,
    data: Vec<u8>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, ..Default::default() }
    }

    pub fn entries(&self) -> &[ArrayEntry] {
        &self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn put<T: Scalar>(&mut self, name: &str, m: &Matrix<T>) {
        assert!(!self.index.contains_key(name), "duplicate checkpoint array `{name}`");
        let offset = self.data.len();
        for &v in m.data() {
            v.write_le(&mut self.data);
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ArrayEntry { name: name.into(), rows: m.rows(), cols: m.cols(), dtype: T::DTYPE.into(), offset });
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<Matrix<T>> {
        let e = &self.entries[*self.index.get(name).ok_or_else(|| DaliError::Format(format!("missing array `{name}`")))?];
        if e.dtype != T::DTYPE {
            return Err(DaliError::Format(format!("array `{name}` has dtype {}, expected {}", e.dtype, T::DTYPE)));
        }
        let n = e.rows * e.cols;
        let bytes = self
            .data
            .get(e.offset..e.offset + n * T::BYTES)
            .ok_or_else(|| DaliError::Format(format!("array `{name}` exceeds the payload")))?;
        let vals = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        Ok(Matrix::from_vec(e.rows, e.cols, vals))
    }

    pub fn put_params<T: Scalar>(&mut self, prefix: &str, ps: &ParamSet<T>) {
        for (name, m) in ps.iter() {
            self.put(&format!("{prefix}/{name}"), m);
        }
    }

    /// Loads every parameter of `ps` by name; shapes must match.
    pub fn load_params<T: Scalar>(&self, prefix: &str, ps: &mut ParamSet<T>) -> Result<()> {
        for id in ps.ids().collect::<Vec<_>>() {
            let key = format!("{prefix}/{}", ps.name(id));
            let m = self.get::<T>(&key)?;
            if m.shape() != ps.get(id).shape() {
                return Err(DaliError::Format(format!(
                    "`{key}` has shape {:?}, model expects {:?}",
                    m.shape(),
                    ps.get(id).shape()
                )));
            }
            *ps.get_mut(id) = m;
        }
        Ok(())
    }

    pub fn put_adam<T: Scalar>(&mut self, prefix: &str, opt: &Adam<T>) {
        for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
            self.put(&format!("{prefix}/m/{i}"), m);
            self.put(&format!("{prefix}/v/{i}"), v);
        }
        self.put(&format!("{prefix}/step"), &Matrix::<f64>::scalar(opt.step as f64));
    }

    pub fn load_adam<T: Scalar>(&self, prefix: &str, opt: &mut Adam<T>) -> Result<()> {
        for i in 0..opt.m.len() {
            opt.m[i] = self.get(&format!("{prefix}/m/{i}"))?;
            opt.v[i] = self.get(&format!("{prefix}/v/{i}"))?;
        }
        opt.step = self.get::<f64>(&format!("{prefix}/step"))?.item() as u64;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest { version: CHECKPOINT_VERSION, meta: self.meta.clone(), arrays: self.entries.clone() };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + json.len() + self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(DaliError::Format("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(DaliError::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(20..20 + len).ok_or_else(|| DaliError::Format("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        let data = bytes[20 + len..].to_vec();
        let index = manifest.arrays.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
        Ok(Self { meta: manifest.meta, entries: manifest.arrays, index, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_mixed_dtypes() {
        let mut c = Checkpoint::new(serde_json::json!({"variant": "dali_s"}));
        let a = Matrix::<f32>::from_fn(2, 3, |r, c| (r * 3 + c) as f32 * 0.5);
        let b = Matrix::<f64>::from_fn(1, 2, |_, c| c as f64 - 0.25);
        c.put("a", &a);
        c.put("b", &b);
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.get::<f32>("a").unwrap(), a);
        assert_eq!(back.get::<f64>("b").unwrap(), b);
        assert!(back.get::<f64>("a").is_err());
        assert!(back.get::<f32>("zzz").is_err());
        assert_eq!(back.meta["variant"], "dali_s");
    }

    #[test]
    fn truncated_or_foreign_bytes_fail() {
        assert!(Checkpoint::from_bytes(b"hello").is_err());
        let mut c = Checkpoint::new(serde_json::Value::Null);
        c.put("x", &Matrix::<f64>::zeros(4, 4));
        let bytes = c.to_bytes().unwrap();
        let cut = Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).unwrap();
        assert!(cut.get::<f64>("x").is_err());
    }
}
