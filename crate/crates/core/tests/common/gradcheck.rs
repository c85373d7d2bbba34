//! Finite-difference checks. Each returns the worst relative error over the
//! checked gradients, or `None` when the random point falls within `KINK`
//! of a non-differentiable point and is skipped.

use convprune::finetune::{triplet_forward_backward, Triplet};
use convprune::network::NetworkModel;
use convprune::pooling::{self, rmac_grid, PoolingConfig, PoolingKind};
use convprune::retrieval::cosine_with_grad;
use convprune::tensor::{conv2d_backward, conv2d_forward, maxpool2_backward, maxpool2_forward, relu_backward, relu_forward};
use convprune::tensor::TapeOp;
use convprune::Tensor;
use rand::Rng;

use super::*;

pub const H: f64 = 1e-6;
pub const KINK: f64 = 1e-4;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn with_data(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Random conv geometry; loss = <r, conv(x)>.
pub fn conv(seed: u64) -> Option<f64> {
    let mut g = rng(seed);
    let (ci, co) = (g.random_range(1..=3), g.random_range(1..=3));
    let k = g.random_range(1..=3);
    let stride = g.random_range(1..=2);
    let pad = g.random_range(0..=k / 2);
    let (h, w) = (g.random_range(k..=6), g.random_range(k..=6));
    let x = uniform(&mut g, &[ci, h, w], -1.0, 1.0);
    let wt = uniform(&mut g, &[co, ci, k, k], -1.0, 1.0);
    let b = uniform(&mut g, &[co], -1.0, 1.0);
    let out = conv2d_forward(&x, &wt, &b, stride, pad).unwrap();
    let r = uniform(&mut g, out.shape(), -1.0, 1.0);
    let grads = conv2d_backward(&x, &wt, stride, pad, &r).unwrap();

    let f_x = |d: &[f64]| dot(r.data(), conv2d_forward(&with_data(x.shape(), d), &wt, &b, stride, pad).unwrap().data());
    let f_w = |d: &[f64]| dot(r.data(), conv2d_forward(&x, &with_data(wt.shape(), d), &b, stride, pad).unwrap().data());
    let f_b = |d: &[f64]| dot(r.data(), conv2d_forward(&x, &wt, &with_data(b.shape(), d), stride, pad).unwrap().data());
    let e = [
        rel_err(grads.input.data(), &central_diff(f_x, x.data(), H)),
        rel_err(grads.weights.data(), &central_diff(f_w, wt.data(), H)),
        rel_err(grads.bias.data(), &central_diff(f_b, b.data(), H)),
    ];
    Some(e.into_iter().fold(0.0, f64::max))
}

pub fn relu(seed: u64) -> Option<f64> {
    let mut g = rng(seed);
    let n = g.random_range(1..=32);
    let x = uniform(&mut g, &[n], -1.0, 1.0);
    if x.data().iter().any(|v| v.abs() < KINK) {
        return None;
    }
    let r = uniform(&mut g, &[n], -1.0, 1.0);
    let bp = relu_backward(&x, &r).unwrap();
    let fd = central_diff(|d| dot(r.data(), relu_forward(&with_data(&[n], d)).data()), x.data(), H);
    Some(rel_err(bp.data(), &fd))
}

pub fn maxpool(seed: u64) -> Option<f64> {
    let mut g = rng(seed);
    let shape = [g.random_range(1..=3), 2 * g.random_range(1..=3), 2 * g.random_range(1..=3)];
    let x = uniform(&mut g, &shape, -1.0, 1.0);
    let shifted: Vec<f64> = x.data().iter().map(|v| v + 2.0).collect();
    if !tape_is_smooth_values(&shifted, &shape) {
        return None;
    }
    let (out, argmax) = maxpool2_forward(&x).unwrap();
    let r = uniform(&mut g, out.shape(), -1.0, 1.0);
    let bp = maxpool2_backward(&shape, &argmax, &r).unwrap();
    let fd = central_diff(|d| dot(r.data(), maxpool2_forward(&with_data(&shape, d)).unwrap().0.data()), x.data(), H);
    Some(rel_err(bp.data(), &fd))
}

fn tape_is_smooth_values(positive: &[f64], shape: &[usize]) -> bool {
    // Window gaps on strictly positive values.
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    for ch in 0..c {
        for y in (0..h).step_by(2) {
            for x in (0..w).step_by(2) {
                let mut win = [
                    positive[(ch * h + y) * w + x],
                    positive[(ch * h + y) * w + x + 1],
                    positive[(ch * h + y + 1) * w + x],
                    positive[(ch * h + y + 1) * w + x + 1],
                ];
                win.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if win[0] - win[1] < KINK {
                    return false;
                }
            }
        }
    }
    true
}

fn pooled(x: &Tensor, cfg: &PoolingConfig) -> Vec<f64> {
    pooling::pool(x, cfg).unwrap().values
}

fn pool_check(x: &Tensor, cfg: &PoolingConfig, r: &[f64]) -> f64 {
    let (_, tape) = pooling::pool_recorded(x, cfg).unwrap();
    let bp = pooling::pool_backward(&tape, r).unwrap();
    let fd = central_diff(|d| dot(r, &pooled(&with_data(x.shape(), d), cfg)), x.data(), H);
    rel_err(bp.data(), &fd)
}

pub fn sqp(seed: u64) -> Option<f64> {
    let mut g = rng(seed);
    let shape = [g.random_range(1..=4), g.random_range(1..=5), g.random_range(1..=5)];
    let x = uniform(&mut g, &shape, -1.0, 1.0);
    let r: Vec<f64> = (0..shape[0]).map(|_| g.random_range(-1.0..1.0)).collect();
    Some(pool_check(&x, &PoolingConfig::sqp(), &r))
}

pub fn rmac(seed: u64) -> Option<f64> {
    let mut g = rng(seed);
    let shape = [g.random_range(1..=3), g.random_range(2..=8), g.random_range(2..=8)];
    let levels = g.random_range(1..=3);
    let x = uniform(&mut g, &shape, -1.0, 1.0);
    let grid = rmac_grid(shape[2], shape[1], levels).unwrap();
    if !rmac_regions_separated(&x, &library_rects(&grid), KINK) {
        return None;
    }
    let r: Vec<f64> = (0..shape[0]).map(|_| g.random_range(-1.0..1.0)).collect();
    let cfg = PoolingConfig {
        kind: PoolingKind::Rmac,
        levels,
    };
    Some(pool_check(&x, &cfg, &r))
}

/// Gradient of the normalized similarity with respect to both descriptors.
pub fn cosine(seed: u64) -> Option<f64> {
    let mut g = rng(seed);
    let n = g.random_range(1..=12);
    let a: Vec<f64> = (0..n).map(|_| g.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..n).map(|_| g.random_range(-1.0..1.0)).collect();
    let (_, ga, gb) = cosine_with_grad(&a, &b);
    let fa = central_diff(|d| cosine_with_grad(d, &b).0, &a, H);
    let fb = central_diff(|d| cosine_with_grad(&a, d).0, &b, H);
    Some(rel_err(&ga, &fa).max(rel_err(&gb, &fb)))
}

/// Full triplet loss on the micro network: every weight and bias gradient
/// against central differences. The margin is raised when needed so the
/// raw hinge value is at least 0.1.
pub fn composite(seed: u64, kind: PoolingKind) -> Option<f64> {
    let mut model = micro_model(seed);
    let mut g = rng(seed ^ 0x7e57);
    let images: Vec<Tensor> = (0..3).map(|_| uniform(&mut g, &[2, 4, 4], -1.0, 1.0)).collect();
    let t = Triplet {
        query: 0,
        positive: 1,
        negative: 2,
    };
    let cfg = PoolingConfig { kind, levels: 3 };
    for img in &images {
        let (features, tape) = model.forward_recorded(img).unwrap();
        if !tape_is_smooth(&tape, KINK) {
            return None;
        }
        if kind == PoolingKind::Rmac {
            let grid = rmac_grid(features.shape()[2], features.shape()[1], 3).unwrap();
            if !rmac_regions_separated(&features, &library_rects(&grid), KINK) {
                return None;
            }
        }
    }
    // K(q,-) - K(q,+); m is chosen so the raw hinge is at least 0.1.
    let gap = {
        let d = |id: usize| pooling::pool(&model.forward_features(&images[id]).unwrap(), &cfg).unwrap();
        let (q, p, n) = (d(0), d(1), d(2));
        convprune::retrieval::similarity(&q, &n).unwrap() - convprune::retrieval::similarity(&q, &p).unwrap()
    };
    let margin = (0.1 - gap).max(0.1);
    let outcome = triplet_forward_backward(&model, images.as_slice(), &t, &cfg, margin).unwrap();
    let grads = outcome.grads.expect("hinge is active");

    let layers: Vec<usize> = model.conv_layers().map(|(i, _)| i).collect();
    let mut worst: f64 = 0.0;
    for (li, grad) in layers.iter().zip(&grads) {
        assert_eq!(*li, grad.layer);
        let w0 = model.conv(*li).unwrap().weights().clone();
        let fd_w = central_diff(
            |d| {
                model.conv_mut(*li).unwrap().set_weights(with_data(w0.shape(), d)).unwrap();
                triplet_loss_value(&model, &images, &t, &cfg, margin)
            },
            w0.data(),
            H,
        );
        model.conv_mut(*li).unwrap().set_weights(w0).unwrap();
        let b0 = model.conv(*li).unwrap().bias().clone();
        let fd_b = central_diff(
            |d| {
                model.conv_mut(*li).unwrap().set_bias(with_data(b0.shape(), d)).unwrap();
                triplet_loss_value(&model, &images, &t, &cfg, margin)
            },
            b0.data(),
            H,
        );
        model.conv_mut(*li).unwrap().set_bias(b0).unwrap();
        worst = worst.max(rel_err(grad.weights.data(), &fd_w)).max(rel_err(grad.bias.data(), &fd_b));
    }
    Some(worst)
}

/// Runs `check` over seeds until `count` points are accepted.
pub fn sweep(count: usize, first_seed: u64, check: impl Fn(u64) -> Option<f64>) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut accepted = 0;
    let mut seed = first_seed;
    while accepted < count {
        assert!(seed - first_seed < 50 * count as u64, "too many points rejected as kinks");
        if let Some(e) = check(seed) {
            worst = worst.max(e);
            accepted += 1;
        }
        seed += 1;
    }
    (worst, (seed - first_seed) as usize - accepted)
}

pub fn model_snapshot(model: &NetworkModel) -> Vec<f64> {
    model
        .conv_layers()
        .flat_map(|(_, c)| c.weights().data().iter().chain(c.bias().data()).copied().collect::<Vec<_>>())
        .collect()
}

/// Outcome of [`h2_taylor`].
pub struct TaylorCheck {
    /// Worst `| score - |L(w) - L(0)| |` over the checked weights.
    pub worst: f64,
    /// Largest `|L(w) - L(0)|` seen, to show the check is not vacuous.
    pub largest_change: f64,
    pub checked: usize,
    pub skipped: usize,
}

fn relu_signs(model: &NetworkModel, images: &[Tensor]) -> Vec<bool> {
    let mut signs = Vec::new();
    for img in images {
        let (_, tape) = model.forward_recorded(img).unwrap();
        for op in tape.ops() {
            if let TapeOp::Relu { input } = op {
                signs.extend(input.data().iter().map(|z| *z > 0.0));
            }
        }
    }
    signs
}

fn mean_loss(model: &NetworkModel, images: &[Tensor], triplets: &[Triplet], cfg: &PoolingConfig, margin: f64) -> f64 {
    triplets.iter().map(|t| triplet_loss_value(model, images, t, cfg, margin)).sum::<f64>() / triplets.len() as f64
}

/// H2 first-order fidelity on the micro network. In each conv layer a few
/// weights are replaced by values with `|w| <= 1e-3` while the rest keep
/// their O(1) initialization; for each of them the H2 score is compared with
/// the exact loss change from zeroing it. Weights whose removal crosses a
/// ReLU or hinge kink are skipped.
pub fn h2_taylor(seed: u64) -> TaylorCheck {
    use convprune::salience::salience_h2;
    let mut model = micro_model(seed);
    let mut g = rng(seed ^ 0x7a11);
    let mut tested = Vec::new();
    let layers: Vec<usize> = model.conv_layers().map(|(i, _)| i).collect();
    for &li in &layers {
        let mut w = model.conv(li).unwrap().weights().clone();
        for _ in 0..6 {
            let flat = g.random_range(0..w.len());
            let mag = g.random_range(1e-4..1e-3);
            w.data_mut()[flat] = if g.random_bool(0.5) { mag } else { -mag };
            tested.push((li, flat));
        }
        model.conv_mut(li).unwrap().set_weights(w).unwrap();
    }
    tested.sort();
    tested.dedup();
    let images: Vec<Tensor> = (0..6).map(|_| uniform(&mut g, &[2, 4, 4], -1.0, 1.0)).collect();
    let triplets = [(0, 1, 2), (3, 4, 5), (1, 0, 3), (4, 5, 0)].map(|(q, p, n)| Triplet {
        query: q,
        positive: p,
        negative: n,
    });
    let cfg = PoolingConfig::sqp();
    let d = |m: &NetworkModel, id: u32| pooling::pool(&m.forward_features(&images[id as usize]).unwrap(), &cfg).unwrap();
    let gap = triplets
        .iter()
        .map(|t| {
            let (q, p, n) = (d(&model, t.query), d(&model, t.positive), d(&model, t.negative));
            convprune::retrieval::similarity(&q, &n).unwrap() - convprune::retrieval::similarity(&q, &p).unwrap()
        })
        .fold(f64::NEG_INFINITY, f64::max);
    // Every hinge active by at least 0.1.
    let margin = (0.1 - gap).max(0.1);
    let salience = salience_h2(&model, &triplets, images.as_slice(), &cfg, margin).unwrap();
    let base_loss = mean_loss(&model, &images, &triplets, &cfg, margin);
    let base_signs = relu_signs(&model, &images);

    let mut out = TaylorCheck {
        worst: 0.0,
        largest_change: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (li, flat) in tested {
        let mut zeroed = model.clone();
        zeroed.conv_mut(li).unwrap().prune_weight(flat);
        if relu_signs(&zeroed, &images) != base_signs {
            out.skipped += 1;
            continue;
        }
        let change = (base_loss - mean_loss(&zeroed, &images, &triplets, &cfg, margin)).abs();
        let k = salience.layers.iter().position(|l| l.layer == li).unwrap();
        let score = salience.layers[k].scores.data()[flat];
        out.worst = out.worst.max((score - change).abs());
        out.largest_change = out.largest_change.max(change);
        out.checked += 1;
    }
    out
}
