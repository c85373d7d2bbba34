//! Oracles and helpers shared by the integration tests. Everything here is
//! written independently of the library code it checks.
#![allow(dead_code)]

use std::collections::HashSet;

use convprune::finetune::Triplet;
use convprune::network::{init_network, ArchitectureSpec, LayerSpec, NetworkModel};
use convprune::pooling::{self, PoolingConfig};
use convprune::retrieval::similarity;
use convprune::salience::SalienceMap;
use convprune::tensor::{GradientTape, TapeOp};
use convprune::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `||a - b|| / max(||a||, ||b||)`; the absolute difference when both norms
/// are below 1e-9 (an identically zero gradient).
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-9 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Direct six-loop convolution.
pub fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = b.data()[o];
                for c in 0..ci {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xo * stride + dx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += x.data()[(c * h + iy as usize) * wd + ix as usize]
                                * w.data()[((o * ci + c) * kh + dy) * kw + dx];
                        }
                    }
                }
                out[(o * oh + y) * ow + xo] = acc;
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out).unwrap()
}

/// `sqrt(sum x^2 / (W H))` per channel.
pub fn naive_sqp(x: &Tensor) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    (0..c)
        .map(|ch| {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    let v = x.data()[(ch * h + y) * w + xx];
                    s += v * v;
                }
            }
            (s / (w * h) as f64).sqrt()
        })
        .collect()
}

/// Regions as `(x0, y0, width, height)`.
pub type Rect = (usize, usize, usize, usize);

/// Mean over regions of the regional maximum, per channel.
pub fn naive_rmac(x: &Tensor, regions: &[Rect]) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    (0..c)
        .map(|ch| {
            let total: f64 = regions
                .iter()
                .map(|&(x0, y0, rw, rh)| {
                    let mut m = f64::NEG_INFINITY;
                    for y in y0..y0 + rh {
                        for xx in x0..x0 + rw {
                            m = m.max(x.data()[(ch * h + y) * w + xx]);
                        }
                    }
                    m
                })
                .sum();
            total / regions.len() as f64
        })
        .collect()
}

/// Hand enumeration of the 8x8, three-level grid: one 8x8 square, a 2x2
/// layout of 5x5 squares at offsets {0, 3}, a 3x3 layout of 4x4 squares at
/// offsets {0, 2, 4}.
pub fn grid_8x8_l3() -> Vec<Rect> {
    let mut g = vec![(0, 0, 8, 8)];
    for y in [0, 3] {
        for x in [0, 3] {
            g.push((x, y, 5, 5));
        }
    }
    for y in [0, 2, 4] {
        for x in [0, 2, 4] {
            g.push((x, y, 4, 4));
        }
    }
    g
}

pub fn library_rects(grid: &pooling::RoiGrid) -> Vec<Rect> {
    grid.regions.iter().map(|r| (r.x0, r.y0, r.width, r.height)).collect()
}

/// Removal set by fully sorting every eligible `(score, layer, index)`.
pub fn brute_force_removal(map: &SalienceMap, keep: f64) -> Vec<(usize, usize)> {
    let mut all = Vec::new();
    for l in &map.layers {
        for (i, (&s, &ok)) in l.scores.data().iter().zip(&l.eligible).enumerate() {
            if ok {
                all.push((s, l.layer, i));
            }
        }
    }
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let k = ((1.0 - keep) * all.len() as f64).round() as usize;
    let mut out: Vec<(usize, usize)> = all[..k].iter().map(|&(_, l, i)| (l, i)).collect();
    out.sort();
    out
}

/// Two conv layers on 2x4x4 inputs: conv3x3(2->3), ReLU, conv3x3(3->4).
pub fn micro_arch() -> ArchitectureSpec {
    ArchitectureSpec {
        input: [2, 4, 4],
        layers: vec![LayerSpec::conv(3, 3), LayerSpec::relu(), LayerSpec::conv(4, 3)],
    }
}

/// Micro model with random biases so every layer is exercised.
pub fn micro_model(seed: u64) -> NetworkModel {
    let mut model = init_network(&micro_arch(), seed).unwrap();
    let mut r = rng(seed ^ 0xb1a5);
    for (_, conv) in model.conv_layers_mut() {
        let b = uniform(&mut r, conv.bias().shape(), -0.3, 0.3);
        conv.set_bias(b).unwrap();
    }
    model
}

/// Every ReLU input and every max-pool window gap at least `delta` away
/// from a kink.
pub fn tape_is_smooth(tape: &GradientTape, delta: f64) -> bool {
    let mut last_relu: Option<Vec<f64>> = None;
    for op in tape.ops() {
        match op {
            TapeOp::Relu { input } => {
                if input.data().iter().any(|z| z.abs() < delta) {
                    return false;
                }
                last_relu = Some(input.data().iter().map(|z| z.max(0.0)).collect());
            }
            TapeOp::MaxPool2 { input_shape, .. } => {
                let Some(values) = &last_relu else { continue };
                if !windows_separated(values, input_shape, delta) {
                    return false;
                }
            }
            TapeOp::Conv2d { .. } => last_relu = None,
        }
    }
    true
}

fn windows_separated(values: &[f64], shape: &[usize], delta: f64) -> bool {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    for ch in 0..c {
        for y in (0..h).step_by(2) {
            for x in (0..w).step_by(2) {
                let mut win = [
                    values[(ch * h + y) * w + x],
                    values[(ch * h + y) * w + x + 1],
                    values[(ch * h + y + 1) * w + x],
                    values[(ch * h + y + 1) * w + x + 1],
                ];
                win.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if win[0] > 0.0 && win[0] - win[1] < delta {
                    return false;
                }
            }
        }
    }
    true
}

/// Every R-MAC region's maximum is separated from its runner-up by `delta`.
pub fn rmac_regions_separated(x: &Tensor, regions: &[Rect], delta: f64) -> bool {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    for ch in 0..c {
        for &(x0, y0, rw, rh) in regions {
            let mut vals: Vec<f64> = Vec::new();
            for y in y0..y0 + rh {
                for xx in x0..x0 + rw {
                    vals.push(x.data()[(ch * h + y) * w + xx]);
                }
            }
            if vals.len() < 2 {
                continue;
            }
            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if vals[0] - vals[1] < delta {
                return false;
            }
        }
    }
    true
}

/// Forward-only triplet loss through the library pipeline.
pub fn triplet_loss_value(
    model: &NetworkModel,
    images: &[Tensor],
    t: &Triplet,
    pooling: &PoolingConfig,
    margin: f64,
) -> f64 {
    let d = |id: u32| pooling::pool(&model.forward_features(&images[id as usize]).unwrap(), pooling).unwrap();
    let (q, p, n) = (d(t.query), d(t.positive), d(t.negative));
    (margin + similarity(&q, &n).unwrap() - similarity(&q, &p).unwrap()).max(0.0)
}

/// AP by its definition: mean over relevant items of precision at the rank
/// where each is found (missing ones contribute 0).
pub fn ap_oracle(ranking: &[u32], relevant: &HashSet<u32>) -> f64 {
    let mut hits = 0.0;
    let mut sum = 0.0;
    for (i, id) in ranking.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1.0;
            sum += hits / (i + 1) as f64;
        }
    }
    sum / relevant.len() as f64
}

pub mod gradcheck;
