//! Per-weight salience scores for the four edge-pruning heuristics:
//!
//! * `h1`: `|w|`
//! * `h2`: `|mean over triplets of dL/dw * w|`, with `L` the triplet loss
//! * `h3`: `mean(|N_i|) * |w|`
//! * `h4`: `Var(N_i) * w^2`
//!
//! `N_i` is channel `i` of a conv layer's input, pooled over samples and
//! spatial positions.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{Container, ContainerWriter};
use crate::error::{Error, Result};
use crate::finetune::{batch_gradient, ImageLookup, Triplet};
use crate::network::NetworkModel;
use crate::pooling::PoolingConfig;
use crate::tensor::Tensor;

pub const SALIENCE_KIND: &str = "convprune-salience";
pub const DEFAULT_STAT_IMAGES: usize = 256;
pub const DEFAULT_H2_TRIPLETS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heuristic {
    H1,
    H2,
    H3,
    H4,
}

impl Heuristic {
    pub const ALL: [Heuristic; 4] = [Heuristic::H1, Heuristic::H2, Heuristic::H3, Heuristic::H4];
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Heuristic::H1 => "h1",
            Heuristic::H2 => "h2",
            Heuristic::H3 => "h3",
            Heuristic::H4 => "h4",
        })
    }
}

impl FromStr for Heuristic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "h1" | "1" => Ok(Heuristic::H1),
            "h2" | "2" => Ok(Heuristic::H2),
            "h3" | "3" => Ok(Heuristic::H3),
            "h4" | "4" => Ok(Heuristic::H4),
            other => Err(Error::InvalidArgument(format!("unknown heuristic '{other}' (expected h1..h4)"))),
        }
    }
}

/// Mergeable running moments of one channel.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ChannelMoments {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
    pub mean_abs: f64,
}

impl ChannelMoments {
    /// Moments of a slice, computed in two passes.
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let m2 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        let mean_abs = values.iter().map(|v| v.abs()).sum::<f64>() / n;
        Self {
            count: values.len() as u64,
            mean,
            m2,
            mean_abs,
        }
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&mut self, other: &ChannelMoments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = other.mean - self.mean;
        self.mean += delta * nb / n;
        self.m2 += other.m2 + delta * delta * na * nb / n;
        self.mean_abs += (other.mean_abs - self.mean_abs) * nb / n;
        self.count += other.count;
    }

    /// Population variance (divisor n).
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    /// Index of the conv layer in the network.
    pub layer: usize,
    pub mean_abs: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub layers: Vec<LayerStats>,
    /// Number of images aggregated.
    pub sample_count: usize,
    /// Hash of the aggregated pixel data, in order.
    pub data_hash: u64,
}

/// Streaming accumulator for [`ActivationStats`]. Feed images with
/// [`add_image`](Self::add_image); partial accumulators over disjoint image
/// sets combine with [`merge`](Self::merge).
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    layers: Vec<(usize, Vec<ChannelMoments>)>,
    samples: usize,
    hash: u64,
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;

fn fnv_extend(mut h: u64, data: &[f64]) -> u64 {
    for v in data {
        for b in (*v as f32).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

impl StatsAccumulator {
    pub fn new(model: &NetworkModel) -> Self {
        let layers = model
            .conv_layers()
            .map(|(i, c)| (i, vec![ChannelMoments::default(); c.kernel_dims().1]))
            .collect();
        Self {
            layers,
            samples: 0,
            hash: FNV_OFFSET,
        }
    }

    fn single(model: &NetworkModel, image: &Tensor) -> Result<Self> {
        let mut acc = Self::new(model);
        let inputs = model.conv_inputs(image)?;
        for ((_, moments), input) in acc.layers.iter_mut().zip(&inputs) {
            let (c, h, w) = input.dims3()?;
            let plane = h * w;
            for (ch, m) in moments.iter_mut().enumerate().take(c) {
                *m = ChannelMoments::from_values(&input.data()[ch * plane..(ch + 1) * plane]);
            }
        }
        acc.samples = 1;
        acc.hash = fnv_extend(FNV_OFFSET, image.data());
        Ok(acc)
    }

    pub fn add_image(&mut self, model: &NetworkModel, image: &Tensor) -> Result<()> {
        let one = Self::single(model, image)?;
        self.merge(&one)
    }

    pub fn merge(&mut self, other: &StatsAccumulator) -> Result<()> {
        if self.layers.len() != other.layers.len()
            || self
                .layers
                .iter()
                .zip(&other.layers)
                .any(|(a, b)| a.0 != b.0 || a.1.len() != b.1.len())
        {
            return Err(Error::Shape("cannot merge statistics of different architectures".into()));
        }
        for ((_, mine), (_, theirs)) in self.layers.iter_mut().zip(&other.layers) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                a.merge(b);
            }
        }
        self.samples += other.samples;
        // Order-sensitive combination: hash(self) then hash(other).
        self.hash = self.hash.rotate_left(17) ^ other.hash.wrapping_mul(0x9e3779b97f4a7c15);
        Ok(())
    }

    pub fn finish(self) -> Result<ActivationStats> {
        if self.samples == 0 {
            return Err(Error::InvalidArgument("activation statistics need at least one image".into()));
        }
        Ok(ActivationStats {
            layers: self
                .layers
                .into_iter()
                .map(|(layer, m)| LayerStats {
                    layer,
                    mean_abs: m.iter().map(|c| c.mean_abs).collect(),
                    variance: m.iter().map(|c| c.variance()).collect(),
                })
                .collect(),
            sample_count: self.samples,
            data_hash: self.hash,
        })
    }
}

/// Per-input-channel `mean(|x|)` and population variance of every conv
/// layer's input, over all images and spatial positions.
pub fn collect_activation_stats<'a, I>(model: &NetworkModel, images: I) -> Result<ActivationStats>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    let images: Vec<&Tensor> = images.into_iter().collect();
    if images.is_empty() {
        return Err(Error::InvalidArgument("activation statistics need at least one image".into()));
    }
    let partials = images
        .par_iter()
        .map(|img| StatsAccumulator::single(model, img))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = StatsAccumulator::new(model);
    for p in &partials {
        acc.merge(p)?;
    }
    acc.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataFingerprint {
    pub data_hash: u64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSalience {
    pub layer: usize,
    pub name: String,
    pub scores: Tensor,
    /// Snapshot of the layer mask when the scores were computed.
    pub eligible: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SalienceMap {
    pub heuristic: Heuristic,
    pub layers: Vec<LayerSalience>,
    pub fingerprint: Option<DataFingerprint>,
    pub warnings: Vec<String>,
}

impl SalienceMap {
    pub fn eligible_count(&self) -> usize {
        self.layers.iter().map(|l| l.eligible.iter().filter(|&&e| e).count()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::json!({
            "heuristic": self.heuristic,
            "fingerprint": self.fingerprint,
            "warnings": self.warnings,
            "layers": self.layers.iter().map(|l| serde_json::json!({"layer": l.layer, "name": l.name})).collect::<Vec<_>>(),
        });
        let mut w = ContainerWriter::new(SALIENCE_KIND, header);
        for l in &self.layers {
            w.add_f32(&format!("{}.scores", l.name), &l.scores);
            w.add_bits(&format!("{}.eligible", l.name), l.scores.shape(), &l.eligible);
        }
        w.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let c = Container::from_bytes(bytes)?;
        if c.kind() != SALIENCE_KIND {
            return Err(Error::Integrity(format!(
                "expected a '{SALIENCE_KIND}' file, found '{}'",
                c.kind()
            )));
        }
        #[derive(Deserialize)]
        struct Header {
            heuristic: Heuristic,
            fingerprint: Option<DataFingerprint>,
            #[serde(default)]
            warnings: Vec<String>,
            layers: Vec<LayerRef>,
        }
        #[derive(Deserialize)]
        struct LayerRef {
            layer: usize,
            name: String,
        }
        let h: Header = serde_json::from_value(c.header().clone())
            .map_err(|e| Error::Integrity(format!("bad salience header: {e}")))?;
        let layers = h
            .layers
            .into_iter()
            .map(|l| {
                let scores = c.f32_tensor(&format!("{}.scores", l.name))?;
                let (_, eligible) = c.bits(&format!("{}.eligible", l.name))?;
                Ok(LayerSalience {
                    layer: l.layer,
                    name: l.name,
                    scores,
                    eligible,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            heuristic: h.heuristic,
            layers,
            fingerprint: h.fingerprint,
            warnings: h.warnings,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Builds a map by scoring each unmasked weight with `score(layer, input
/// channel, weight)`; masked positions score 0.
fn score_weights(
    model: &NetworkModel,
    heuristic: Heuristic,
    score: impl Fn(usize, usize, usize, f64) -> f64 + Sync,
) -> SalienceMap {
    let convs: Vec<_> = model.conv_layers().collect();
    let layers = convs
        .par_iter()
        .enumerate()
        .map(|(k, (layer, conv))| {
            let (_, c_in, kh, kw) = conv.kernel_dims();
            let per_in = kh * kw;
            let data = conv
                .weights()
                .data()
                .iter()
                .zip(conv.mask())
                .enumerate()
                .map(|(flat, (&w, &keep))| {
                    if keep {
                        score(k, flat, (flat / per_in) % c_in, w)
                    } else {
                        0.0
                    }
                })
                .collect();
            LayerSalience {
                layer: *layer,
                name: conv.name().to_string(),
                scores: Tensor::new(conv.weights().shape().to_vec(), data).expect("shape preserved"),
                eligible: conv.mask().to_vec(),
            }
        })
        .collect();
    SalienceMap {
        heuristic,
        layers,
        fingerprint: None,
        warnings: Vec::new(),
    }
}

pub fn salience_h1(model: &NetworkModel) -> SalienceMap {
    score_weights(model, Heuristic::H1, |_, _, _, w| w.abs())
}

fn check_stats(model: &NetworkModel, stats: &ActivationStats) -> Result<()> {
    if stats.sample_count == 0 {
        return Err(Error::InvalidArgument("activation statistics are empty".into()));
    }
    let convs: Vec<_> = model.conv_layers().collect();
    if convs.len() != stats.layers.len() {
        return Err(Error::Shape(format!(
            "statistics cover {} conv layers, model has {}",
            stats.layers.len(),
            convs.len()
        )));
    }
    for ((layer, conv), s) in convs.iter().zip(&stats.layers) {
        let c_in = conv.kernel_dims().1;
        if *layer != s.layer || s.mean_abs.len() != c_in || s.variance.len() != c_in {
            return Err(Error::Shape(format!(
                "statistics for layer {} do not match {} ({} input channels)",
                s.layer,
                conv.name(),
                c_in
            )));
        }
    }
    Ok(())
}

fn stats_fingerprint(stats: &ActivationStats) -> Option<DataFingerprint> {
    Some(DataFingerprint {
        data_hash: stats.data_hash,
        samples: stats.sample_count,
    })
}

pub fn salience_h3(model: &NetworkModel, stats: &ActivationStats) -> Result<SalienceMap> {
    check_stats(model, stats)?;
    let mut map = score_weights(model, Heuristic::H3, |k, _, i, w| stats.layers[k].mean_abs[i] * w.abs());
    map.fingerprint = stats_fingerprint(stats);
    Ok(map)
}

pub fn salience_h4(model: &NetworkModel, stats: &ActivationStats) -> Result<SalienceMap> {
    check_stats(model, stats)?;
    let mut map = score_weights(model, Heuristic::H4, |k, _, i, w| stats.layers[k].variance[i] * w * w);
    map.fingerprint = stats_fingerprint(stats);
    Ok(map)
}

/// First-order Taylor estimate of the loss change from removing each
/// weight: `|mean_t dL_t/dw * w|` over the triplet batch.
pub fn salience_h2<D: ImageLookup + Sync + ?Sized>(
    model: &NetworkModel,
    triplets: &[Triplet],
    images: &D,
    pooling: &PoolingConfig,
    margin: f64,
) -> Result<SalienceMap> {
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("H2 salience needs at least one triplet".into()));
    }
    let batch = batch_gradient(model, images, triplets, pooling, margin)?;
    let grads = &batch.grads;
    let mut map = score_weights(model, Heuristic::H2, |k, flat, _, w| {
        (grads[k].weights.data()[flat] * w).abs()
    });
    if batch.active == 0 {
        let msg = "every triplet hinge is inactive; H2 scores are all zero".to_string();
        log::warn!("{msg}");
        map.warnings.push(msg);
    }
    let mut hash = FNV_OFFSET;
    for t in triplets {
        for id in [t.query, t.positive, t.negative] {
            if let Some(img) = images.image(id) {
                hash = fnv_extend(hash, img.data());
            }
        }
    }
    map.fingerprint = Some(DataFingerprint {
        data_hash: hash,
        samples: triplets.len(),
    });
    Ok(map)
}
