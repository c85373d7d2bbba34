//! Single-file tensor container used for models and salience maps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   "CPRNPACK"
//! version   u32       FORMAT_VERSION
//! length    u32       byte length of the JSON manifest
//! manifest  JSON      { kind, version, header, tensors: [entry...] }
//! blob      bytes     tensor payloads, addressed by entry offset/length
//! ```
//!
//! Every entry carries its shape and a CRC32 of its payload. `f32` entries
//! are little-endian 32-bit floats; `bits` entries are packed LSB-first.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"CPRNPACK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    Bits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    version: u32,
    header: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug)]
pub struct ContainerWriter {
    kind: String,
    header: serde_json::Value,
    entries: Vec<TensorEntry>,
    blob: Vec<u8>,
}

impl ContainerWriter {
    pub fn new(kind: &str, header: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            header,
            entries: Vec::new(),
            blob: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, dtype: Dtype, shape: &[usize], bytes: Vec<u8>) {
        self.entries.push(TensorEntry {
            name: name.to_string(),
            dtype,
            shape: shape.to_vec(),
            offset: self.blob.len() as u64,
            length: bytes.len() as u64,
            crc32: crc32fast::hash(&bytes),
        });
        self.blob.extend_from_slice(&bytes);
    }

    /// Stores a tensor narrowed to 32-bit floats.
    pub fn add_f32(&mut self, name: &str, tensor: &Tensor) {
        let bytes = tensor
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        self.push(name, Dtype::F32, tensor.shape(), bytes);
    }

    pub fn add_bits(&mut self, name: &str, shape: &[usize], bits: &[bool]) {
        self.push(name, Dtype::Bits, shape, pack_bits(bits));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            kind: self.kind.clone(),
            version: FORMAT_VERSION,
            header: self.header.clone(),
            tensors: self.entries.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + self.blob.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.blob);
        Ok(out)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct Container {
    kind: String,
    header: serde_json::Value,
    entries: Vec<TensorEntry>,
    blob: Vec<u8>,
}

impl Container {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Integrity(format!(
                "file is {} bytes, shorter than the 16-byte preamble",
                bytes.len()
            )));
        }
        if bytes[..8] != MAGIC {
            return Err(Error::Integrity("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let manifest_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let manifest_end = 16usize
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Integrity("manifest extends past end of file".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])
            .map_err(|e| Error::Integrity(format!("unreadable manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Version {
                found: manifest.version,
                expected: FORMAT_VERSION,
            });
        }
        let blob = bytes[manifest_end..].to_vec();
        for entry in &manifest.tensors {
            let end = entry
                .offset
                .checked_add(entry.length)
                .filter(|&end| end <= blob.len() as u64)
                .ok_or_else(|| Error::Integrity(format!("tensor '{}' is truncated", entry.name)))?;
            let payload = &blob[entry.offset as usize..end as usize];
            if crc32fast::hash(payload) != entry.crc32 {
                return Err(Error::Integrity(format!("checksum mismatch in tensor '{}'", entry.name)));
            }
            let count: usize = entry.shape.iter().product();
            let expected = match entry.dtype {
                Dtype::F32 => count * 4,
                Dtype::Bits => count.div_ceil(8),
            };
            if expected as u64 != entry.length {
                return Err(Error::Integrity(format!(
                    "tensor '{}' has {} bytes, shape {:?} needs {}",
                    entry.name, entry.length, entry.shape, expected
                )));
            }
        }
        Ok(Self {
            kind: manifest.kind,
            header: manifest.header,
            entries: manifest.tensors,
            blob,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn header(&self) -> &serde_json::Value {
        &self.header
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    fn entry(&self, name: &str, dtype: Dtype) -> Result<(&TensorEntry, &[u8])> {
        let entry = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Integrity(format!("missing tensor '{name}'")))?;
        if entry.dtype != dtype {
            return Err(Error::Integrity(format!(
                "tensor '{name}' has dtype {:?}, expected {dtype:?}",
                entry.dtype
            )));
        }
        let start = entry.offset as usize;
        Ok((entry, &self.blob[start..start + entry.length as usize]))
    }

    /// Reads an `f32` entry, widened to `f64`.
    pub fn f32_tensor(&self, name: &str) -> Result<Tensor> {
        let (entry, payload) = self.entry(name, Dtype::F32)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Tensor::new(entry.shape.clone(), data)
    }

    pub fn bits(&self, name: &str) -> Result<(Vec<usize>, Vec<bool>)> {
        let (entry, payload) = self.entry(name, Dtype::Bits)?;
        let count = entry.shape.iter().product();
        Ok((entry.shape.clone(), unpack_bits(payload, count)))
    }
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], count: usize) -> Vec<bool> {
    (0..count).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}
