mod common;

use common::gradcheck::{self, sweep};
use convprune::pooling::PoolingKind;

const SEEDS: usize = 30;

#[test]
fn conv_gradients() {
    let (worst, _) = sweep(SEEDS, 0, gradcheck::conv);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn relu_gradients() {
    let (worst, _) = sweep(SEEDS, 0, gradcheck::relu);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn maxpool_gradients() {
    let (worst, _) = sweep(SEEDS, 0, gradcheck::maxpool);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn sqp_gradients() {
    let (worst, _) = sweep(SEEDS, 0, gradcheck::sqp);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn rmac_gradients() {
    let (worst, _) = sweep(SEEDS, 0, gradcheck::rmac);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn cosine_gradients() {
    let (worst, _) = sweep(SEEDS, 0, gradcheck::cosine);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn triplet_loss_gradients_sqp() {
    let (worst, _) = sweep(SEEDS, 0, |s| gradcheck::composite(s, PoolingKind::Sqp));
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn triplet_loss_gradients_rmac() {
    let (worst, _) = sweep(SEEDS, 0, |s| gradcheck::composite(s, PoolingKind::Rmac));
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn sqp_zero_map_has_finite_zero_gradient() {
    let x = convprune::Tensor::zeros(&[3, 4, 4]);
    let (_, tape) = convprune::pooling::pool_recorded(&x, &convprune::PoolingConfig::sqp()).unwrap();
    let g = convprune::pooling::pool_backward(&tape, &[1.0, -2.0, 0.5]).unwrap();
    assert!(g.data().iter().all(|v| *v == 0.0));
}
