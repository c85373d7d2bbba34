//! Triplet ranking loss through the full descriptor pipeline, triplet
//! sampling, and mask-preserving SGD.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{RetrievalDataset, Split};
use crate::error::{Error, Result};
use crate::network::{init_network, ArchitectureSpec, NetworkModel};
use crate::pooling::{self, Descriptor, PoolingConfig};
use crate::retrieval::{cosine_with_grad, similarity};
use crate::tensor::{ParamGrad, Tensor};

pub const HARD_NEGATIVE_POOL: usize = 32;

/// Anything that can resolve an item id to its image.
pub trait ImageLookup {
    fn image(&self, id: u32) -> Option<&Tensor>;
}

impl ImageLookup for RetrievalDataset {
    fn image(&self, id: u32) -> Option<&Tensor> {
        RetrievalDataset::image(self, id)
    }
}

impl ImageLookup for HashMap<u32, Tensor> {
    fn image(&self, id: u32) -> Option<&Tensor> {
        self.get(&id)
    }
}

/// Ids index the slice directly.
impl ImageLookup for [Tensor] {
    fn image(&self, id: u32) -> Option<&Tensor> {
        self.get(id as usize)
    }
}

impl ImageLookup for Vec<Tensor> {
    fn image(&self, id: u32) -> Option<&Tensor> {
        self.get(id as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub query: u32,
    pub positive: u32,
    pub negative: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mining {
    #[default]
    Random,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Triplets per SGD step.
    pub batch_size: usize,
    pub triplets_per_epoch: usize,
    pub seed: u64,
    pub mining: Mining,
    pub pooling: PoolingConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 16,
            triplets_per_epoch: 128,
            seed: 0,
            mining: Mining::Random,
            pooling: PoolingConfig::sqp(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidArgument(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.triplets_per_epoch == 0 {
            return Err(Error::InvalidArgument(
                "epochs, batch size and triplets per epoch must all be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// `max(0, m + K(q,-) - K(q,+))`.
pub fn triplet_loss(query: &Descriptor, positive: &Descriptor, negative: &Descriptor, margin: f64) -> Result<f64> {
    if !(margin > 0.0) {
        return Err(Error::InvalidArgument(format!("margin must be > 0, got {margin}")));
    }
    let kp = similarity(query, positive)?;
    let kn = similarity(query, negative)?;
    Ok(hinge(margin + kn - kp))
}

fn hinge(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Mixes a base seed with a stream index (SplitMix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Draws `count` triplets from `(id, label)` items.
///
/// Queries and positives are uniform over same-label pairs; queries whose
/// label has a single item are redrawn. Random mining picks a uniform
/// different-label negative. Hard mining draws up to
/// [`HARD_NEGATIVE_POOL`] distinct candidates and keeps the one most similar
/// to the query under `descriptors` (first candidate on ties).
pub fn sample_triplets(
    items: &[(u32, u32)],
    count: usize,
    mining: Mining,
    seed: u64,
    descriptors: Option<&HashMap<u32, Descriptor>>,
) -> Result<Vec<Triplet>> {
    let mut by_label: HashMap<u32, Vec<u32>> = HashMap::new();
    for &(id, label) in items {
        by_label.entry(label).or_default().push(id);
    }
    if by_label.len() < 2 {
        return Err(Error::Dataset(format!(
            "triplet sampling needs at least 2 instances, found {}",
            by_label.len()
        )));
    }
    if !by_label.values().any(|ids| ids.len() >= 2) {
        return Err(Error::Dataset("no instance has two or more images".into()));
    }
    if mining == Mining::Hard && descriptors.is_none() {
        return Err(Error::InvalidArgument("hard mining needs current descriptors".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let &(query, label) = items.choose(&mut rng).expect("items nonempty");
        let same = &by_label[&label];
        if same.len() < 2 {
            continue;
        }
        let positive = loop {
            let p = *same.choose(&mut rng).unwrap();
            if p != query {
                break p;
            }
        };
        let negative = match mining {
            Mining::Random => loop {
                let &(n, l) = items.choose(&mut rng).unwrap();
                if l != label {
                    break n;
                }
            },
            Mining::Hard => {
                let negatives: Vec<u32> = items.iter().filter(|(_, l)| *l != label).map(|(id, _)| *id).collect();
                let pool: Vec<u32> = negatives
                    .choose_multiple(&mut rng, HARD_NEGATIVE_POOL.min(negatives.len()))
                    .copied()
                    .collect();
                let descs = descriptors.unwrap();
                let q = descs
                    .get(&query)
                    .ok_or_else(|| Error::Dataset(format!("no descriptor for item {query}")))?;
                let mut best = (f64::NEG_INFINITY, pool[0]);
                for &cand in &pool {
                    let d = descs
                        .get(&cand)
                        .ok_or_else(|| Error::Dataset(format!("no descriptor for item {cand}")))?;
                    let k = similarity(q, d)?;
                    if k > best.0 {
                        best = (k, cand);
                    }
                }
                best.1
            }
        };
        out.push(Triplet {
            query,
            positive,
            negative,
        });
    }
    Ok(out)
}

/// Loss of one triplet and, when its hinge is active, the gradient of the
/// loss with respect to every conv parameter.
pub struct TripletOutcome {
    pub loss: f64,
    pub grads: Option<Vec<ParamGrad>>,
}

fn fetch<'a, D: ImageLookup + ?Sized>(images: &'a D, id: u32) -> Result<&'a Tensor> {
    images
        .image(id)
        .ok_or_else(|| Error::Dataset(format!("no image for item {id}")))
}

pub fn triplet_forward_backward<D: ImageLookup + ?Sized>(
    model: &NetworkModel,
    images: &D,
    triplet: &Triplet,
    pooling: &PoolingConfig,
    margin: f64,
) -> Result<TripletOutcome> {
    let mut passes = Vec::with_capacity(3);
    for id in [triplet.query, triplet.positive, triplet.negative] {
        let (features, tape) = model.forward_recorded(fetch(images, id)?)?;
        let (desc, pool_tape) = pooling::pool_recorded(&features, pooling)?;
        passes.push((desc, tape, pool_tape));
    }
    let (q, p, n) = (&passes[0].0.values, &passes[1].0.values, &passes[2].0.values);
    let (kp, gq_p, gp) = cosine_with_grad(q, p);
    let (kn, gq_n, gn) = cosine_with_grad(q, n);
    let raw = margin + kn - kp;
    if raw <= 0.0 {
        return Ok(TripletOutcome { loss: 0.0, grads: None });
    }
    let dq: Vec<f64> = gq_n.iter().zip(&gq_p).map(|(a, b)| a - b).collect();
    let dp: Vec<f64> = gp.iter().map(|v| -v).collect();
    let upstreams = [dq, dp, gn];

    let mut total: Option<Vec<ParamGrad>> = None;
    for ((_, tape, pool_tape), up) in passes.iter().zip(&upstreams) {
        let feat_grad = pooling::pool_backward(pool_tape, up)?;
        let bp = model.backward(tape, feat_grad)?;
        match total.as_mut() {
            None => total = Some(bp.params),
            Some(acc) => add_grads(acc, &bp.params),
        }
    }
    Ok(TripletOutcome {
        loss: raw,
        grads: total,
    })
}

fn add_grads(acc: &mut [ParamGrad], other: &[ParamGrad]) {
    for (a, b) in acc.iter_mut().zip(other) {
        debug_assert_eq!(a.layer, b.layer);
        for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
            *x += y;
        }
        for (x, y) in a.bias.data_mut().iter_mut().zip(b.bias.data()) {
            *x += y;
        }
    }
}

pub fn zero_grads(model: &NetworkModel) -> Vec<ParamGrad> {
    model
        .conv_layers()
        .map(|(layer, c)| ParamGrad {
            layer,
            weights: Tensor::zeros(c.weights().shape()),
            bias: Tensor::zeros(c.bias().shape()),
        })
        .collect()
}

/// Batch-mean loss and gradients.
pub struct BatchGradient {
    pub mean_loss: f64,
    /// Triplets with an active hinge.
    pub active: usize,
    pub count: usize,
    /// Mean gradient over the batch, one entry per conv layer in order.
    pub grads: Vec<ParamGrad>,
}

/// Evaluates every triplet (in parallel) and sums their gradients in batch
/// order, so the result does not depend on thread scheduling.
pub fn batch_gradient<D: ImageLookup + Sync + ?Sized>(
    model: &NetworkModel,
    images: &D,
    triplets: &[Triplet],
    pooling: &PoolingConfig,
    margin: f64,
) -> Result<BatchGradient> {
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("empty triplet batch".into()));
    }
    let outcomes = triplets
        .par_iter()
        .map(|t| triplet_forward_backward(model, images, t, pooling, margin))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = zero_grads(model);
    let mut loss = 0.0;
    let mut active = 0;
    for o in &outcomes {
        loss += o.loss;
        if let Some(g) = &o.grads {
            active += 1;
            add_grads(&mut grads, g);
        }
    }
    let n = triplets.len() as f64;
    for g in &mut grads {
        for v in g.weights.data_mut().iter_mut().chain(g.bias.data_mut()) {
            *v /= n;
        }
    }
    Ok(BatchGradient {
        mean_loss: loss / n,
        active,
        count: triplets.len(),
        grads,
    })
}

/// Mean triplet loss of a batch without gradients.
pub fn batch_loss<D: ImageLookup + Sync + ?Sized>(
    model: &NetworkModel,
    images: &D,
    triplets: &[Triplet],
    pooling: &PoolingConfig,
    margin: f64,
) -> Result<f64> {
    let losses = triplets
        .par_iter()
        .map(|t| {
            let mut d = Vec::with_capacity(3);
            for id in [t.query, t.positive, t.negative] {
                d.push(pooling::pool(&model.forward_features(fetch(images, id)?)?, pooling)?);
            }
            triplet_loss(&d[0], &d[1], &d[2], margin)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / triplets.len().max(1) as f64)
}

/// Applies one SGD step with the mask projection.
pub fn apply_sgd(model: &mut NetworkModel, grads: &[ParamGrad], lr: f64) -> Result<()> {
    for g in grads {
        let conv = model
            .conv_mut(g.layer)
            .ok_or_else(|| Error::MissingTape(format!("gradient for non-conv layer {}", g.layer)))?;
        conv.sgd_step(&g.weights, &g.bias, lr);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub active_fraction: f64,
    pub steps: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let _ = writeln!(out, "{}", serde_json::to_string(e).expect("log entries serialize"));
        }
        out
    }
}

fn check_finite(step: usize, batch: &BatchGradient, model: &NetworkModel) -> Result<()> {
    if !batch.mean_loss.is_finite() {
        return Err(Error::NonFinite {
            step,
            location: "triplet loss".into(),
        });
    }
    for g in &batch.grads {
        if !g.weights.all_finite() || !g.bias.all_finite() {
            let name = model.conv(g.layer).map(|c| c.name().to_string()).unwrap_or_default();
            return Err(Error::NonFinite {
                step,
                location: format!("gradient of layer {} ({name})", g.layer),
            });
        }
    }
    Ok(())
}

/// Current descriptors of `ids`, used for hard-negative mining.
pub fn descriptors_for<D: ImageLookup + Sync + ?Sized>(
    model: &NetworkModel,
    images: &D,
    ids: &[u32],
    pooling: &PoolingConfig,
) -> Result<HashMap<u32, Descriptor>> {
    ids.par_iter()
        .map(|&id| Ok((id, pooling::pool(&model.forward_features(fetch(images, id)?)?, pooling)?)))
        .collect()
}

/// SGD over triplets from `items`, resetting masked weights to zero after
/// every update.
pub fn train_on<D: ImageLookup + Sync + ?Sized>(
    model: &NetworkModel,
    images: &D,
    items: &[(u32, u32)],
    config: &FinetuneConfig,
) -> Result<(NetworkModel, TrainingLog)> {
    config.validate()?;
    model.validate_masks()?;
    let mut model = model.clone();
    let masked_before = model.conv_weight_count() - model.unmasked_weight_count();
    let mut log = TrainingLog::default();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let descriptors = match config.mining {
            Mining::Hard => {
                let ids: Vec<u32> = items.iter().map(|(id, _)| *id).collect();
                Some(descriptors_for(&model, images, &ids, &config.pooling)?)
            }
            Mining::Random => None,
        };
        let triplets = sample_triplets(
            items,
            config.triplets_per_epoch,
            config.mining,
            derive_seed(config.seed, epoch as u64),
            descriptors.as_ref(),
        )?;
        let mut loss_sum = 0.0;
        let mut active = 0;
        let mut steps = 0;
        for batch in triplets.chunks(config.batch_size) {
            let bg = batch_gradient(&model, images, batch, &config.pooling, config.margin)?;
            check_finite(step, &bg, &model)?;
            apply_sgd(&mut model, &bg.grads, config.learning_rate)?;
            loss_sum += bg.mean_loss * bg.count as f64;
            active += bg.active;
            step += 1;
            steps += 1;
        }
        model.validate_masks()?;
        debug_assert_eq!(model.conv_weight_count() - model.unmasked_weight_count(), masked_before);
        let entry = EpochLog {
            epoch: epoch + 1,
            mean_loss: loss_sum / triplets.len() as f64,
            active_fraction: active as f64 / triplets.len() as f64,
            steps,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.5} active {:.3} ({:.1}s)",
            entry.epoch,
            entry.mean_loss,
            entry.active_fraction,
            entry.wall_time_s
        );
        log.epochs.push(entry);
    }
    model.metadata.history.push(format!(
        "sgd epochs={} lr={} margin={} batch={} triplets/epoch={} mining={:?} pooling={} seed={}",
        config.epochs,
        config.learning_rate,
        config.margin,
        config.batch_size,
        config.triplets_per_epoch,
        config.mining,
        config.pooling.kind,
        config.seed
    ));
    Ok((model, log))
}

/// Fine-tunes on the dataset's train split.
pub fn finetune(
    model: &NetworkModel,
    dataset: &RetrievalDataset,
    config: &FinetuneConfig,
) -> Result<(NetworkModel, TrainingLog)> {
    let items = dataset.labeled_ids(Split::Train);
    train_on(model, dataset, &items, config)
}

/// Trains a freshly initialized network (seeded by `config.seed`) with the
/// fine-tuning loop.
pub fn train_baseline(
    architecture: &ArchitectureSpec,
    dataset: &RetrievalDataset,
    config: &FinetuneConfig,
) -> Result<(NetworkModel, TrainingLog)> {
    let model = init_network(architecture, config.seed)?;
    let (mut model, log) = finetune(&model, dataset, config)?;
    model.metadata.name = "baseline".into();
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pooling::PoolingKind;

    fn d(values: &[f64]) -> Descriptor {
        Descriptor {
            values: values.to_vec(),
            kind: PoolingKind::Sqp,
            width: 1,
            height: 1,
        }
    }

    /// Unit vectors with prescribed cosine to `e0`.
    fn at_cos(k: f64) -> Descriptor {
        d(&[k, (1.0 - k * k).sqrt()])
    }

    #[test]
    fn loss_examples() {
        let q = d(&[1.0, 0.0]);
        assert_eq!(triplet_loss(&q, &at_cos(0.9), &at_cos(0.2), 0.1).unwrap(), 0.0);
        let l = triplet_loss(&q, &at_cos(0.5), &at_cos(0.45), 0.1).unwrap();
        assert!((l - 0.05).abs() < 1e-12);
        assert_eq!(triplet_loss(&q, &q, &at_cos(0.3), 0.1).unwrap(), 0.0);
        assert!(triplet_loss(&q, &q, &q, 0.0).is_err());
        // Zero descriptors compare as K = 0.
        let z = d(&[0.0, 0.0]);
        assert!((triplet_loss(&q, &z, &z, 0.1).unwrap() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn sampler_rules() {
        let items: Vec<(u32, u32)> = (0..20).map(|i| (i, i / 4)).collect();
        let a = sample_triplets(&items, 200, Mining::Random, 3, None).unwrap();
        let b = sample_triplets(&items, 200, Mining::Random, 3, None).unwrap();
        assert_eq!(a, b);
        let label = |id: u32| id / 4;
        for t in &a {
            assert_eq!(label(t.query), label(t.positive));
            assert_ne!(label(t.query), label(t.negative));
            assert_ne!(t.query, t.positive);
        }
        assert!(sample_triplets(&[(0, 0), (1, 0)], 1, Mining::Random, 0, None).is_err());
        assert!(sample_triplets(&[(0, 0), (1, 1)], 1, Mining::Random, 0, None).is_err());
        assert!(sample_triplets(&items, 1, Mining::Hard, 0, None).is_err());
    }

    #[test]
    fn singleton_instances_are_skipped_as_queries() {
        let items = vec![(0, 0), (1, 0), (2, 1), (3, 2)];
        let ts = sample_triplets(&items, 50, Mining::Random, 9, None).unwrap();
        assert!(ts.iter().all(|t| t.query <= 1 && t.positive <= 1));
    }

    #[test]
    fn config_validation() {
        assert!(FinetuneConfig::default().validate().is_ok());
        assert!(FinetuneConfig { margin: 0.0, ..Default::default() }.validate().is_err());
        assert!(FinetuneConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(FinetuneConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(5, 5), derive_seed(5, 5));
    }
}
