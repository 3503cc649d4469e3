//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CNNICKPT"
//! version  u32      currently 1
//! config   u64 byte length, then UTF-8 text: one "key=value\n" per line,
//!          sorted by key
//! tensors  u32 count, then per tensor:
//!            name     u32 byte length + UTF-8 bytes
//!            dtype    u8, element width in bytes (4 = f32, 8 = f64)
//!            rank     u32
//!            dims     rank × u64
//!            payload  u64 byte length + elements as little-endian IEEE-754
//! ```
//!
//! Encoding is a pure function of the contents, so save → load → save
//! reproduces identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CNNICKPT";
pub const VERSION: u32 = 1;

/// A tensor as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: u8,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

/// Decoded checkpoint: a key/value config section plus named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<RawTensor>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.config
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("checkpoint: missing config key '{key}'")))
    }

    pub fn get_parsed<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Data(format!("checkpoint: bad value for '{key}'")))
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: &str, tensor: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(tensor.len() * T::DTYPE_TAG as usize);
        for &v in tensor.data() {
            v.write_le(&mut bytes);
        }
        self.tensors.push(RawTensor {
            name: name.to_string(),
            dtype: T::DTYPE_TAG,
            shape: tensor.shape().to_vec(),
            bytes,
        });
    }

    pub fn find(&self, name: &str) -> Result<&RawTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Data(format!("checkpoint: missing tensor '{name}'")))
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let raw = self.find(name)?;
        if raw.dtype != T::DTYPE_TAG {
            return Err(Error::Data(format!(
                "checkpoint: tensor '{name}' has element width {}, expected {}",
                raw.dtype,
                T::DTYPE_TAG
            )));
        }
        let width = raw.dtype as usize;
        let data: Vec<T> = raw.bytes.chunks_exact(width).map(T::read_le).collect();
        Tensor::new(raw.shape.clone(), data)
    }

    /// Element width shared by all stored tensors (4 or 8).
    pub fn dtype(&self) -> Result<u8> {
        match self.tensors.first() {
            Some(t) => Ok(t.dtype),
            None => Err(Error::Data("checkpoint: no tensors".into())),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());

        let mut text = String::new();
        for (k, v) in &self.config {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(Error::Config(format!(
                    "checkpoint: config entry '{k}' contains a reserved character"
                )));
            }
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());

        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(t.bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Data("checkpoint: wrong magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Data(format!(
                "checkpoint: unsupported version {version}"
            )));
        }
        let text_len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Error::Data("checkpoint: config is not UTF-8".into()))?;
        let mut config = BTreeMap::new();
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Data(format!("checkpoint: bad config line '{line}'")));
            };
            config.insert(k.to_string(), v.to_string());
        }

        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Data("checkpoint: tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != 4 && dtype != 8 {
                return Err(Error::Data(format!(
                    "checkpoint: tensor '{name}' has unknown element width {dtype}"
                )));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let payload_len = r.u64()? as usize;
            let expected: usize = shape.iter().product::<usize>() * dtype as usize;
            if payload_len != expected {
                return Err(Error::Data(format!(
                    "checkpoint: tensor '{name}' declares {payload_len} payload bytes, shape implies {expected}"
                )));
            }
            let bytes = r.take(payload_len)?.to_vec();
            tensors.push(RawTensor {
                name,
                dtype,
                shape,
                bytes,
            });
        }
        if r.pos != r.bytes.len() {
            return Err(Error::Data(format!(
                "checkpoint: {} trailing bytes",
                r.bytes.len() - r.pos
            )));
        }
        Ok(Container { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open checkpoint {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data("checkpoint: truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
