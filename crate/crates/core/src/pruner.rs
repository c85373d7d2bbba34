//! Global edge pruning: rank all unmasked conv weights by salience across
//! layers and mask the lowest `round((1 - t) * N)` of them.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::NetworkModel;
use crate::salience::{Heuristic, SalienceMap};

/// Weights chosen for removal and the resulting threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Smallest retained score; `None` when nothing is retained.
    pub threshold: Option<f64>,
    /// `(layer index, flat weight index)`, sorted.
    pub removal: Vec<(usize, usize)>,
    /// Number of unmasked weights considered.
    pub eligible: usize,
    /// Eligible scores equal to the threshold.
    pub ties_at_threshold: usize,
    /// Of those, how many were removed by the index tie rule.
    pub ties_removed: usize,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    layer: usize,
    flat: usize,
}

fn by_score_then_index(a: &Candidate, b: &Candidate) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then(a.layer.cmp(&b.layer))
        .then(a.flat.cmp(&b.flat))
}

pub fn check_keep_fraction(keep: f64) -> Result<()> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep fraction must be in (0, 1], got {keep}")));
    }
    Ok(())
}

/// Picks exactly `round((1 - keep) * N)` of the `N` eligible weights with the
/// lowest scores. Equal scores are removed in ascending (layer, flat index)
/// order.
pub fn select_threshold(salience: &SalienceMap, keep: f64) -> Result<Selection> {
    check_keep_fraction(keep)?;
    let mut candidates = Vec::with_capacity(salience.eligible_count());
    for l in &salience.layers {
        if l.eligible.len() != l.scores.len() {
            return Err(Error::Shape(format!(
                "{}: {} eligibility flags for {} scores",
                l.name,
                l.eligible.len(),
                l.scores.len()
            )));
        }
        for (flat, (&score, &ok)) in l.scores.data().iter().zip(&l.eligible).enumerate() {
            if !ok {
                continue;
            }
            if !(score.is_finite() && score >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{}: salience score {score} at index {flat} is not a finite nonnegative value",
                    l.name
                )));
            }
            candidates.push(Candidate {
                score,
                layer: l.layer,
                flat,
            });
        }
    }
    let n = candidates.len();
    let k = (((1.0 - keep) * n as f64).round() as usize).min(n);

    // k-th order statistic under the total (score, layer, flat) order.
    if k > 0 && k < n {
        candidates.select_nth_unstable_by(k, by_score_then_index);
    }
    let threshold = if k < n {
        Some(candidates[k..].iter().map(|c| c.score).fold(f64::INFINITY, f64::min))
    } else {
        None
    };
    let mut removal: Vec<(usize, usize)> = candidates[..k].iter().map(|c| (c.layer, c.flat)).collect();
    removal.sort_unstable();
    let (ties_at_threshold, ties_removed) = match threshold {
        Some(tau) => (
            candidates.iter().filter(|c| c.score == tau).count(),
            candidates[..k].iter().filter(|c| c.score == tau).count(),
        ),
        None => (0, 0),
    };
    Ok(Selection {
        threshold,
        removal,
        eligible: n,
        ties_at_threshold,
        ties_removed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSize {
    pub layer: String,
    pub total: usize,
    pub remaining: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub heuristic: Option<Heuristic>,
    pub target_keep: f64,
    /// Retained fraction of the weights that were unmasked before pruning.
    pub achieved_keep: f64,
    pub threshold: Option<f64>,
    pub ties_at_threshold: usize,
    pub ties_removed: usize,
    pub removed: usize,
    pub total_weights: usize,
    pub remaining_weights: usize,
    pub layers: Vec<LayerSize>,
}

impl PruneReport {
    /// Remaining fraction of all conv weights.
    pub fn global_fraction(&self) -> f64 {
        self.remaining_weights as f64 / self.total_weights.max(1) as f64
    }

    /// `layer,total,remaining,fraction` rows.
    pub fn to_csv(&self) -> String {
        layers_csv(&self.layers)
    }
}

pub fn layers_csv(layers: &[LayerSize]) -> String {
    let mut out = String::from("layer,total,remaining,fraction\n");
    for l in layers {
        let _ = writeln!(out, "{},{},{},{}", l.layer, l.total, l.remaining, l.fraction);
    }
    out
}

/// Unmasked-weight counts of every conv layer.
pub fn layer_size_report(model: &NetworkModel) -> Vec<LayerSize> {
    model
        .conv_layers()
        .map(|(_, c)| {
            let total = c.weight_count();
            let remaining = c.unmasked_count();
            LayerSize {
                layer: c.name().to_string(),
                total,
                remaining,
                fraction: remaining as f64 / total.max(1) as f64,
            }
        })
        .collect()
}

fn check_compatible(model: &NetworkModel, salience: &SalienceMap) -> Result<()> {
    let convs: Vec<_> = model.conv_layers().collect();
    if convs.len() != salience.layers.len() {
        return Err(Error::Shape(format!(
            "salience covers {} layers, model has {} conv layers",
            salience.layers.len(),
            convs.len()
        )));
    }
    for ((idx, conv), s) in convs.iter().zip(&salience.layers) {
        if *idx != s.layer || conv.weights().shape() != s.scores.shape() {
            return Err(Error::Shape(format!(
                "salience layer {} {:?} does not match {} {:?}",
                s.layer,
                s.scores.shape(),
                conv.name(),
                conv.weights().shape()
            )));
        }
        if conv.mask() != s.eligible.as_slice() {
            return Err(Error::InvalidArgument(format!(
                "salience for {} was computed against a different mask",
                conv.name()
            )));
        }
    }
    Ok(())
}

/// Masks the selected weights of a copy of `model`. Biases are untouched.
pub fn apply_pruning(model: &NetworkModel, salience: &SalienceMap, keep: f64) -> Result<(NetworkModel, PruneReport)> {
    model.validate_masks()?;
    check_compatible(model, salience)?;
    let sel = select_threshold(salience, keep)?;
    let mut pruned = model.clone();
    for &(layer, flat) in &sel.removal {
        pruned.conv_mut(layer).expect("checked above").prune_weight(flat);
    }
    if !sel.removal.is_empty() {
        pruned.metadata.history.push(format!(
            "prune heuristic={} keep={keep} removed={}",
            salience.heuristic,
            sel.removal.len()
        ));
    }
    let layers = layer_size_report(&pruned);
    let report = PruneReport {
        heuristic: Some(salience.heuristic),
        target_keep: keep,
        achieved_keep: if sel.eligible == 0 {
            1.0
        } else {
            (sel.eligible - sel.removal.len()) as f64 / sel.eligible as f64
        },
        threshold: sel.threshold,
        ties_at_threshold: sel.ties_at_threshold,
        ties_removed: sel.ties_removed,
        removed: sel.removal.len(),
        total_weights: pruned.conv_weight_count(),
        remaining_weights: pruned.unmasked_weight_count(),
        layers,
    };
    Ok((pruned, report))
}
