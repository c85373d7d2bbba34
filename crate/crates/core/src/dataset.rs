//! Retrieval datasets on disk: a JSON manifest of labeled items plus one
//! tensor file per image.
//!
//! Tensor files (`.cptn`) are `"CPTN"`, `u16` version, `u16` rank, `rank`
//! `u32` dims, then little-endian `f32` values. Binary PPM (`P6`) images are
//! also accepted and scaled to `[0, 1]`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"CPTN";
pub const TENSOR_VERSION: u16 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape().len() as u16).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 || bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Integrity("not a CPTN tensor file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TENSOR_VERSION {
        return Err(Error::Version {
            found: version as u32,
            expected: TENSOR_VERSION as u32,
        });
    }
    let rank = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Integrity("tensor header truncated".into()));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count: usize = shape.iter().product();
    if bytes.len() != header + 4 * count {
        return Err(Error::Integrity(format!(
            "tensor payload is {} bytes, shape {:?} needs {}",
            bytes.len() - header,
            shape,
            4 * count
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

/// Decodes a binary PPM into a `(3, H, W)` tensor with values in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let bad = |msg: &str| Error::Integrity(format!("PPM: {msg}"));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // Skip whitespace and comments.
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("only binary P6 images are supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval out of range"));
    }
    pos += 1; // single whitespace after maxval
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = w * h * 3 * bps;
    if bytes.len() < pos + need {
        return Err(bad("pixel data truncated"));
    }
    let px = &bytes[pos..pos + need];
    let mut data = vec![0.0; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            let k = i * 3 + c;
            let v = if bps == 1 {
                px[k] as usize
            } else {
                ((px[2 * k] as usize) << 8) | px[2 * k + 1] as usize
            };
            data[c * w * h + i] = v as f64 / maxval as f64;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Loads an image tensor, choosing the decoder by file extension.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => decode_ppm(&bytes),
        _ => decode_tensor(&bytes),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Index,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub id: u32,
    pub label: u32,
    pub split: Split,
    /// Path relative to the dataset directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    pub id: u32,
    pub relevant: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub image_shape: [usize; 3],
    #[serde(default)]
    pub description: String,
    pub items: Vec<DatasetItem>,
    pub queries: Vec<QuerySpec>,
}

#[derive(Debug, Clone)]
pub struct RetrievalDataset {
    manifest: DatasetManifest,
    images: Vec<Tensor>,
    positions: HashMap<u32, usize>,
}

impl RetrievalDataset {
    /// Builds a dataset from a manifest and images aligned with its items,
    /// checking every invariant.
    pub fn new(manifest: DatasetManifest, images: Vec<Tensor>) -> Result<Self> {
        if images.len() != manifest.items.len() {
            return Err(Error::Dataset(format!(
                "{} images for {} manifest items",
                images.len(),
                manifest.items.len()
            )));
        }
        let mut positions = HashMap::with_capacity(images.len());
        for (pos, (item, image)) in manifest.items.iter().zip(&images).enumerate() {
            if positions.insert(item.id, pos).is_some() {
                return Err(Error::Dataset(format!("duplicate item id {}", item.id)));
            }
            if image.shape() != manifest.image_shape {
                return Err(Error::Dataset(format!(
                    "item {} has shape {:?}, dataset declares {:?}",
                    item.id,
                    image.shape(),
                    manifest.image_shape
                )));
            }
        }
        let ds = Self {
            manifest,
            images,
            positions,
        };
        ds.validate_queries()?;
        Ok(ds)
    }

    fn validate_queries(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for q in &self.manifest.queries {
            if !seen.insert(q.id) {
                return Err(Error::Dataset(format!("query {} listed twice", q.id)));
            }
            match self.item(q.id) {
                Some(item) if item.split == Split::Query => {}
                _ => return Err(Error::Dataset(format!("query {} is not a query-split item", q.id))),
            }
            if q.relevant.is_empty() {
                return Err(Error::Dataset(format!("query {} has no relevant items", q.id)));
            }
            for r in &q.relevant {
                if *r == q.id {
                    return Err(Error::Dataset(format!("query {} lists itself as relevant", q.id)));
                }
                match self.item(*r) {
                    Some(item) if item.split == Split::Index => {}
                    _ => {
                        return Err(Error::Dataset(format!(
                            "relevant item {r} of query {} is not in the index split",
                            q.id
                        )))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.manifest.image_shape
    }

    pub fn items(&self) -> &[DatasetItem] {
        &self.manifest.items
    }

    pub fn queries(&self) -> &[QuerySpec] {
        &self.manifest.queries
    }

    pub fn item(&self, id: u32) -> Option<&DatasetItem> {
        self.positions.get(&id).map(|&p| &self.manifest.items[p])
    }

    pub fn image(&self, id: u32) -> Option<&Tensor> {
        self.positions.get(&id).map(|&p| &self.images[p])
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (&DatasetItem, &Tensor)> {
        self.manifest
            .items
            .iter()
            .zip(&self.images)
            .filter(move |(item, _)| item.split == split)
    }

    /// `(id, label)` of every item in a split, in manifest order.
    pub fn labeled_ids(&self, split: Split) -> Vec<(u32, u32)> {
        self.split(split).map(|(i, _)| (i.id, i.label)).collect()
    }

    /// Order-sensitive FNV-1a fingerprint of the manifest and pixel data,
    /// used to tag data-dependent results.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (item, img) in self.manifest.items.iter().zip(&self.images) {
            feed(&item.id.to_le_bytes());
            feed(&item.label.to_le_bytes());
            for v in img.data() {
                feed(&(*v as f32).to_le_bytes());
            }
        }
        h
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.version != DATASET_VERSION {
            return Err(Error::Version {
                found: manifest.version,
                expected: DATASET_VERSION,
            });
        }
        let images = manifest
            .items
            .iter()
            .map(|item| read_image(dir.join(&item.path)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(manifest, images)
    }

    /// Writes the manifest and one `.cptn` file per item under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (item, img) in self.manifest.items.iter().zip(&self.images) {
            let path = dir.join(&item.path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            write_tensor_file(path, img)?;
        }
        let manifest_path = dir.join(MANIFEST_FILE);
        fs::write(&manifest_path, serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(manifest_path)
    }
}
