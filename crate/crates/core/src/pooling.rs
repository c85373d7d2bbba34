//! Global descriptors from feature maps: square-root pooling (per-channel
//! root mean square) and R-MAC (regional max, averaged over a multi-scale
//! grid of square regions), with backward passes for fine-tuning.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guards the SQP gradient at an all-zero map.
pub const SQP_EPSILON: f64 = 1e-12;
pub const DEFAULT_RMAC_LEVELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    Sqp,
    Rmac,
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingKind::Sqp => "sqp",
            PoolingKind::Rmac => "rmac",
        })
    }
}

impl FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sqp" => Ok(PoolingKind::Sqp),
            "rmac" | "r-mac" => Ok(PoolingKind::Rmac),
            other => Err(Error::InvalidArgument(format!("unknown pooling '{other}' (expected sqp or rmac)"))),
        }
    }
}

/// Pooling kind plus the R-MAC scale-level count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingConfig {
    pub kind: PoolingKind,
    #[serde(default = "default_levels")]
    pub levels: usize,
}

fn default_levels() -> usize {
    DEFAULT_RMAC_LEVELS
}

impl PoolingConfig {
    pub fn sqp() -> Self {
        Self {
            kind: PoolingKind::Sqp,
            levels: DEFAULT_RMAC_LEVELS,
        }
    }

    pub fn rmac() -> Self {
        Self {
            kind: PoolingKind::Rmac,
            levels: DEFAULT_RMAC_LEVELS,
        }
    }

    pub fn of(kind: PoolingKind) -> Self {
        Self {
            kind,
            levels: DEFAULT_RMAC_LEVELS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
    pub kind: PoolingKind,
    pub width: usize,
    pub height: usize,
}

impl Descriptor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Region {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    pub fn area(&self) -> usize {
        self.width * self.height
    }

    fn fits(&self, w: usize, h: usize) -> bool {
        self.width >= 1 && self.height >= 1 && self.x0 + self.width <= w && self.y0 + self.height <= h
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiGrid {
    pub regions: Vec<Region>,
    pub levels: usize,
    pub width: usize,
    pub height: usize,
}

impl RoiGrid {
    /// A grid of one region covering the whole map.
    pub fn whole(width: usize, height: usize) -> Self {
        Self {
            regions: vec![Region {
                x0: 0,
                y0: 0,
                width,
                height,
            }],
            levels: 1,
            width,
            height,
        }
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// Start offsets for squares of side `side` along an axis of length `len`,
/// evenly spread so that the integer step never exceeds `floor(0.6 * side)`
/// (consecutive squares overlap by at least 40%).
fn axis_offsets(len: usize, side: usize) -> Vec<usize> {
    if len <= side {
        return vec![0];
    }
    let span = len - side;
    let max_step = ((side as f64 * 0.6).floor() as usize).max(1);
    let n = span.div_ceil(max_step) + 1;
    (0..n)
        .map(|k| ((k * span) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

/// Multi-scale R-MAC region grid. Level `l` (1-based) uses squares of side
/// `max(1, floor(2 * min(W,H) / (l + 1)))`; duplicate regions across levels
/// are dropped, keeping first occurrence order.
pub fn rmac_grid(width: usize, height: usize, levels: usize) -> Result<RoiGrid> {
    if width == 0 || height == 0 || levels == 0 {
        return Err(Error::InvalidArgument(format!(
            "R-MAC grid needs W, H, L >= 1 (got {width}, {height}, {levels})"
        )));
    }
    let min_side = width.min(height);
    let mut regions: Vec<Region> = Vec::new();
    for level in 1..=levels {
        let side = ((2 * min_side) / (level + 1)).max(1);
        for &y0 in &axis_offsets(height, side) {
            for &x0 in &axis_offsets(width, side) {
                let r = Region {
                    x0,
                    y0,
                    width: side,
                    height: side,
                };
                if !regions.contains(&r) {
                    regions.push(r);
                }
            }
        }
    }
    Ok(RoiGrid {
        regions,
        levels,
        width,
        height,
    })
}

/// Per-channel `sqrt(mean(x^2))`.
pub fn sqp_pool(features: &Tensor) -> Result<Descriptor> {
    let (c, h, w) = features.dims3()?;
    let area = h * w;
    if area == 0 {
        return Err(Error::Shape("square-root pooling needs a nonempty spatial extent".into()));
    }
    let values = features
        .data()
        .chunks_exact(area)
        .take(c)
        .map(|plane| (plane.iter().map(|v| v * v).sum::<f64>() / area as f64).sqrt())
        .collect();
    Ok(Descriptor {
        values,
        kind: PoolingKind::Sqp,
        width: w,
        height: h,
    })
}

fn rmac_forward(features: &Tensor, grid: &RoiGrid) -> Result<(Descriptor, Vec<usize>)> {
    let (c, h, w) = features.dims3()?;
    if grid.regions.is_empty() {
        return Err(Error::InvalidArgument("R-MAC grid has no regions".into()));
    }
    if let Some(r) = grid.regions.iter().find(|r| !r.fits(w, h)) {
        return Err(Error::InvalidArgument(format!(
            "region {r:?} lies outside the {w}x{h} feature map"
        )));
    }
    let n = grid.regions.len() as f64;
    let data = features.data();
    let mut values = Vec::with_capacity(c);
    let mut argmax = Vec::with_capacity(c * grid.regions.len());
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        let mut acc = 0.0;
        for r in &grid.regions {
            let mut best_idx = r.y0 * w + r.x0;
            let mut best = plane[best_idx];
            for y in r.y0..r.y0 + r.height {
                for x in r.x0..r.x0 + r.width {
                    let v = plane[y * w + x];
                    if v > best {
                        best = v;
                        best_idx = y * w + x;
                    }
                }
            }
            acc += best;
            argmax.push(ch * h * w + best_idx);
        }
        values.push(acc / n);
    }
    Ok((
        Descriptor {
            values,
            kind: PoolingKind::Rmac,
            width: w,
            height: h,
        },
        argmax,
    ))
}

/// Per channel: the mean over regions of the regional maximum.
pub fn rmac_pool(features: &Tensor, grid: &RoiGrid) -> Result<Descriptor> {
    rmac_forward(features, grid).map(|(d, _)| d)
}

/// Saved forward state for [`pool_backward`].
#[derive(Debug, Clone)]
pub enum PoolTape {
    Sqp { features: Tensor, values: Vec<f64> },
    Rmac { shape: Vec<usize>, regions: usize, argmax: Vec<usize> },
}

/// Pools `features` with the given configuration, building the grid when
/// R-MAC is requested.
pub fn pool(features: &Tensor, config: &PoolingConfig) -> Result<Descriptor> {
    match config.kind {
        PoolingKind::Sqp => sqp_pool(features),
        PoolingKind::Rmac => {
            let (_, h, w) = features.dims3()?;
            rmac_pool(features, &rmac_grid(w, h, config.levels)?)
        }
    }
}

pub fn pool_recorded(features: &Tensor, config: &PoolingConfig) -> Result<(Descriptor, PoolTape)> {
    match config.kind {
        PoolingKind::Sqp => {
            let d = sqp_pool(features)?;
            let tape = PoolTape::Sqp {
                features: features.clone(),
                values: d.values.clone(),
            };
            Ok((d, tape))
        }
        PoolingKind::Rmac => {
            let (_, h, w) = features.dims3()?;
            let grid = rmac_grid(w, h, config.levels)?;
            let (d, argmax) = rmac_forward(features, &grid)?;
            let tape = PoolTape::Rmac {
                shape: features.shape().to_vec(),
                regions: grid.regions.len(),
                argmax,
            };
            Ok((d, tape))
        }
    }
}

/// Gradient with respect to the feature maps, given the gradient with
/// respect to the descriptor values.
pub fn pool_backward(tape: &PoolTape, upstream: &[f64]) -> Result<Tensor> {
    match tape {
        PoolTape::Sqp { features, values } => {
            let (c, h, w) = features.dims3()?;
            check_upstream(upstream.len(), c)?;
            let area = (h * w) as f64;
            let mut grad = Tensor::zeros(features.shape());
            let plane = h * w;
            for ch in 0..c {
                let scale = upstream[ch] / (area * values[ch] + SQP_EPSILON);
                let src = &features.data()[ch * plane..(ch + 1) * plane];
                for (g, &x) in grad.data_mut()[ch * plane..(ch + 1) * plane].iter_mut().zip(src) {
                    *g = x * scale;
                }
            }
            Ok(grad)
        }
        PoolTape::Rmac { shape, regions, argmax } => {
            let c = shape[0];
            check_upstream(upstream.len(), c)?;
            let mut grad = Tensor::zeros(shape);
            let n = *regions as f64;
            for (k, &idx) in argmax.iter().enumerate() {
                grad.data_mut()[idx] += upstream[k / regions] / n;
            }
            Ok(grad)
        }
    }
}

fn check_upstream(got: usize, channels: usize) -> Result<()> {
    if got != channels {
        return Err(Error::Shape(format!(
            "descriptor gradient has {got} entries, expected {channels}"
        )));
    }
    Ok(())
}

/// One stored descriptor and its identifying metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorEntry {
    pub id: u32,
    pub label: Option<u32>,
    pub split: Option<String>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SidecarItem {
    id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    pooling: PoolingKind,
    channels: usize,
    width: usize,
    height: usize,
    count: usize,
    items: Vec<SidecarItem>,
}

/// A batch of descriptors: little-endian `f32` vectors back to back in a
/// `.bin` file, described by a JSON sidecar of the same stem.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub kind: PoolingKind,
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub entries: Vec<DescriptorEntry>,
}

impl DescriptorSet {
    pub fn sidecar_path(bin: &Path) -> PathBuf {
        bin.with_extension("json")
    }

    pub fn descriptor(&self, entry: &DescriptorEntry) -> Descriptor {
        Descriptor {
            values: entry.values.clone(),
            kind: self.kind,
            width: self.width,
            height: self.height,
        }
    }

    pub fn save(&self, bin: impl AsRef<Path>) -> Result<()> {
        let bin = bin.as_ref();
        let mut bytes = Vec::with_capacity(self.entries.len() * self.channels * 4);
        for e in &self.entries {
            if e.values.len() != self.channels {
                return Err(Error::Shape(format!(
                    "descriptor {} has {} values, set declares {}",
                    e.id,
                    e.values.len(),
                    self.channels
                )));
            }
            bytes.extend(e.values.iter().flat_map(|&v| (v as f32).to_le_bytes()));
        }
        fs::write(bin, bytes)?;
        let sidecar = Sidecar {
            pooling: self.kind,
            channels: self.channels,
            width: self.width,
            height: self.height,
            count: self.entries.len(),
            items: self
                .entries
                .iter()
                .map(|e| SidecarItem {
                    id: e.id,
                    label: e.label,
                    split: e.split.clone(),
                })
                .collect(),
        };
        fs::write(Self::sidecar_path(bin), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(bin: impl AsRef<Path>) -> Result<Self> {
        let bin = bin.as_ref();
        let sidecar: Sidecar = serde_json::from_slice(&fs::read(Self::sidecar_path(bin))?)?;
        let bytes = fs::read(bin)?;
        if sidecar.items.len() != sidecar.count || bytes.len() != sidecar.count * sidecar.channels * 4 {
            return Err(Error::Integrity(format!(
                "{}: {} bytes do not hold {} descriptors of {} channels",
                bin.display(),
                bytes.len(),
                sidecar.count,
                sidecar.channels
            )));
        }
        let floats: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let entries = sidecar
            .items
            .into_iter()
            .zip(floats.chunks(sidecar.channels.max(1)))
            .map(|(item, values)| DescriptorEntry {
                id: item.id,
                label: item.label,
                split: item.split,
                values: values.to_vec(),
            })
            .collect();
        Ok(Self {
            kind: sidecar.pooling,
            channels: sidecar.channels,
            width: sidecar.width,
            height: sidecar.height,
            entries,
        })
    }
}
