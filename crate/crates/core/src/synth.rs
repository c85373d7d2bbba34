//! Procedural instance-retrieval dataset: each instance is a fixed colored
//! composition of geometric shapes on a tinted background; each image of an
//! instance re-renders it under random translation, scale, brightness and
//! pixel noise.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetItem, DatasetManifest, QuerySpec, RetrievalDataset, Split, DATASET_VERSION};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub instances: usize,
    pub images_per_instance: usize,
    /// `[C, H, W]`; C must be 1 or 3.
    pub shape: [usize; 3],
    pub seed: u64,
    /// Instances `0..train_instances` go to the train split; the rest are
    /// divided into query and index images. Defaults to half.
    pub train_instances: Option<usize>,
    /// Query images per held-out instance; the remainder is indexed.
    /// Defaults to half the images.
    pub queries_per_instance: Option<usize>,
    pub max_translation: f64,
    pub scale_range: (f64, f64),
    pub brightness_range: (f64, f64),
    pub noise_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            instances: 40,
            images_per_instance: 8,
            shape: [3, 32, 32],
            seed: 0,
            train_instances: None,
            queries_per_instance: None,
            max_translation: 0.25,
            scale_range: (0.8, 1.2),
            brightness_range: (0.8, 1.2),
            noise_sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
    Bar,
}

#[derive(Debug, Clone)]
struct Primitive {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    size: f64,
    angle: f64,
    color: [f64; 3],
}

impl Primitive {
    /// Whether the canonical-frame point `(u, v)` lies inside the shape.
    fn contains(&self, u: f64, v: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (u - self.cx, v - self.cy);
        let x = (c * dx + s * dy) / self.size;
        let y = (-s * dx + c * dy) / self.size;
        match self.kind {
            ShapeKind::Disk => x * x + y * y <= 1.0,
            ShapeKind::Square => x.abs() <= 0.8 && y.abs() <= 0.8,
            ShapeKind::Triangle => y >= -0.6 && y <= 1.0 && x.abs() <= (1.0 - y) * 0.6,
            ShapeKind::Ring => {
                let r2 = x * x + y * y;
                (0.3..=1.0).contains(&r2)
            }
            ShapeKind::Bar => x.abs() <= 1.0 && y.abs() <= 0.3,
        }
    }
}

#[derive(Debug, Clone)]
struct Scene {
    background: [f64; 3],
    shapes: Vec<Primitive>,
}

fn random_scene(rng: &mut ChaCha8Rng) -> Scene {
    let background = [rng.random_range(0.0..0.4), rng.random_range(0.0..0.4), rng.random_range(0.0..0.4)];
    let count = rng.random_range(2..=4);
    let shapes = (0..count)
        .map(|_| Primitive {
            kind: match rng.random_range(0..5) {
                0 => ShapeKind::Disk,
                1 => ShapeKind::Square,
                2 => ShapeKind::Triangle,
                3 => ShapeKind::Ring,
                _ => ShapeKind::Bar,
            },
            cx: rng.random_range(-0.55..0.55),
            cy: rng.random_range(-0.55..0.55),
            size: rng.random_range(0.2..0.45),
            angle: rng.random_range(0.0..PI),
            color: [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)],
        })
        .collect();
    Scene { background, shapes }
}

fn render(scene: &Scene, spec: &SynthSpec, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Tensor {
    let [c, h, w] = spec.shape;
    // Normalized image coordinates span [-1, 1], so a shift of 25% of the
    // image extent is 0.5 units.
    let tx = rng.random_range(-spec.max_translation..=spec.max_translation) * 2.0;
    let ty = rng.random_range(-spec.max_translation..=spec.max_translation) * 2.0;
    let scale = rng.random_range(spec.scale_range.0..=spec.scale_range.1);
    let brightness = rng.random_range(spec.brightness_range.0..=spec.brightness_range.1);
    let mut out = Tensor::zeros(&spec.shape);
    let data = out.data_mut();
    for py in 0..h {
        for px in 0..w {
            let u = (2.0 * (px as f64 + 0.5) / w as f64 - 1.0 - tx) / scale;
            let v = (2.0 * (py as f64 + 0.5) / h as f64 - 1.0 - ty) / scale;
            let color = scene
                .shapes
                .iter()
                .rev()
                .find(|s| s.contains(u, v))
                .map_or(scene.background, |s| s.color);
            for ch in 0..c {
                let base = if c == 1 {
                    (color[0] + color[1] + color[2]) / 3.0
                } else {
                    color[ch]
                };
                data[(ch * h + py) * w + px] = (base * brightness).clamp(0.0, 1.0) + noise.sample(rng);
            }
        }
    }
    out
}

/// Renders a dataset in memory. Item ids are assigned in instance-major
/// order; item paths point at `images/<id>.cptn`.
pub fn generate(spec: &SynthSpec) -> Result<RetrievalDataset> {
    if spec.instances < 2 || spec.images_per_instance < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 instances with 2 images each, got {} x {}",
            spec.instances, spec.images_per_instance
        )));
    }
    if spec.shape[0] != 1 && spec.shape[0] != 3 {
        return Err(Error::InvalidArgument("synthetic images need 1 or 3 channels".into()));
    }
    if spec.shape[1] == 0 || spec.shape[2] == 0 {
        return Err(Error::InvalidArgument("synthetic images need a nonzero size".into()));
    }
    let train = spec.train_instances.unwrap_or(spec.instances / 2);
    if train >= spec.instances {
        return Err(Error::InvalidArgument("no instances left for evaluation".into()));
    }
    let k = spec.images_per_instance;
    let queries_per = spec.queries_per_instance.unwrap_or(k / 2).clamp(1, k - 1);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut items = Vec::new();
    let mut images = Vec::new();
    let mut queries = Vec::new();
    for label in 0..spec.instances {
        let scene = random_scene(&mut rng);
        let held_out = label >= train;
        let first_id = items.len() as u32;
        for j in 0..k {
            let id = items.len() as u32;
            let split = match (held_out, j < queries_per) {
                (false, _) => Split::Train,
                (true, true) => Split::Query,
                (true, false) => Split::Index,
            };
            items.push(DatasetItem {
                id,
                label: label as u32,
                split,
                path: format!("images/{id:05}.cptn"),
            });
            images.push(render(&scene, spec, &mut rng, &noise));
        }
        if held_out {
            let index_ids: Vec<u32> = (first_id + queries_per as u32..first_id + k as u32).collect();
            for q in 0..queries_per as u32 {
                queries.push(QuerySpec {
                    id: first_id + q,
                    relevant: index_ids.clone(),
                });
            }
        }
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        image_shape: spec.shape,
        description: format!(
            "synthetic: {} instances x {} images, seed {}",
            spec.instances, k, spec.seed
        ),
        items,
        queries,
    };
    RetrievalDataset::new(manifest, images)
}

/// Renders a dataset and writes it to `dir`.
pub fn gen_dataset(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<RetrievalDataset> {
    let ds = generate(spec)?;
    ds.save(dir)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            instances: 6,
            images_per_instance: 4,
            shape: [3, 16, 16],
            seed: 5,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn splits_and_queries() {
        let ds = generate(&small()).unwrap();
        assert_eq!(ds.items().len(), 24);
        assert_eq!(ds.split(Split::Train).count(), 12);
        assert_eq!(ds.split(Split::Query).count(), 6);
        assert_eq!(ds.split(Split::Index).count(), 6);
        for q in ds.queries() {
            let label = ds.item(q.id).unwrap().label;
            assert_eq!(q.relevant.len(), 2);
            assert!(q.relevant.iter().all(|r| ds.item(*r).unwrap().label == label));
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = generate(&SynthSpec { seed: 6, ..small() }).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn rejects_tiny_specs() {
        assert!(generate(&SynthSpec { instances: 1, ..small() }).is_err());
        assert!(generate(&SynthSpec { images_per_instance: 1, ..small() }).is_err());
        assert!(generate(&SynthSpec { train_instances: Some(6), ..small() }).is_err());
    }
}
