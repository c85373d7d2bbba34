//! Similarity between pooled descriptors, ranking over an index, and the
//! retrieval metrics (mean average precision and 4×recall@4).

use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pooling::{Descriptor, PoolingKind};

/// How the per-image normalization term enters the similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    /// `K = <x, y> / (|x| |y|)`.
    #[default]
    Cosine,
    /// `K = |x| |y| <x, y>`, kept for auditing only.
    Literal,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Similarity of two raw descriptor vectors. A zero-norm input yields 0.
pub fn similarity_values(a: &[f64], b: &[f64], mode: SimilarityMode) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    match mode {
        SimilarityMode::Cosine => {
            if na == 0.0 || nb == 0.0 {
                log::warn!("degenerate zero-norm descriptor; similarity defined as 0");
                0.0
            } else {
                dot(a, b) / (na * nb)
            }
        }
        SimilarityMode::Literal => na * nb * dot(a, b),
    }
}

/// Cosine similarity and its gradients with respect to both arguments.
/// Zero-norm inputs give a similarity of 0 with zero gradients.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return (0.0, vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let k = dot(a, b) / (na * nb);
    let ga = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y / (na * nb) - k * x / (na * na))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x / (na * nb) - k * y / (nb * nb))
        .collect();
    (k, ga, gb)
}

fn check_compatible(x: &Descriptor, y: &Descriptor) -> Result<()> {
    if x.kind != y.kind {
        return Err(Error::InvalidArgument(format!(
            "cannot compare {} and {} descriptors",
            x.kind, y.kind
        )));
    }
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "descriptor lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

pub fn similarity(x: &Descriptor, y: &Descriptor) -> Result<f64> {
    similarity_with(x, y, SimilarityMode::Cosine)
}

pub fn similarity_with(x: &Descriptor, y: &Descriptor, mode: SimilarityMode) -> Result<f64> {
    check_compatible(x, y)?;
    Ok(similarity_values(&x.values, &y.values, mode))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexItem {
    pub id: u32,
    pub label: u32,
    pub descriptor: Descriptor,
}

/// Descriptors of the searchable database. All entries share one pooling
/// kind and length; ids are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorIndex {
    kind: PoolingKind,
    items: Vec<IndexItem>,
    ids: HashSet<u32>,
}

impl DescriptorIndex {
    pub fn new(kind: PoolingKind) -> Self {
        Self {
            kind,
            items: Vec::new(),
            ids: HashSet::new(),
        }
    }

    pub fn insert(&mut self, id: u32, label: u32, descriptor: Descriptor) -> Result<()> {
        if descriptor.kind != self.kind {
            return Err(Error::InvalidArgument(format!(
                "index holds {} descriptors, got {}",
                self.kind, descriptor.kind
            )));
        }
        if let Some(first) = self.items.first() {
            if first.descriptor.len() != descriptor.len() {
                return Err(Error::Shape(format!(
                    "index descriptors have {} entries, got {}",
                    first.descriptor.len(),
                    descriptor.len()
                )));
            }
        }
        if !self.ids.insert(id) {
            return Err(Error::InvalidArgument(format!("duplicate item id {id}")));
        }
        self.items.push(IndexItem { id, label, descriptor });
        Ok(())
    }

    pub fn kind(&self) -> PoolingKind {
        self.kind
    }

    pub fn items(&self) -> &[IndexItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Index ids ordered by similarity to `query`, highest first; ties go to the
/// lower id. `query_id`, if it is in the index, is left out.
pub fn rank(query: &Descriptor, query_id: Option<u32>, index: &DescriptorIndex) -> Result<Vec<u32>> {
    rank_with(query, query_id, index, SimilarityMode::Cosine)
}

pub fn rank_with(
    query: &Descriptor,
    query_id: Option<u32>,
    index: &DescriptorIndex,
    mode: SimilarityMode,
) -> Result<Vec<u32>> {
    let mut scored = Vec::with_capacity(index.len());
    for item in &index.items {
        if Some(item.id) == query_id {
            continue;
        }
        scored.push((similarity_with(query, &item.descriptor, mode)?, item.id));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

/// Non-interpolated average precision. Relevant items missing from the
/// ranking contribute zero.
pub fn average_precision(ranking: &[u32], relevant: &HashSet<u32>) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::InvalidArgument("relevant set is empty".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, id) in ranking.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / relevant.len() as f64)
}

/// Number of relevant items among the first four ranked ids.
pub fn recall4(ranking: &[u32], relevant: &HashSet<u32>) -> u32 {
    ranking.iter().take(4).filter(|id| relevant.contains(id)).count() as u32
}

#[derive(Debug, Clone)]
pub struct EvalQuery {
    pub id: u32,
    pub descriptor: Descriptor,
    pub relevant: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub id: u32,
    pub average_precision: f64,
    /// `None` when the query does not have exactly four relevant items.
    pub recall4: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_query: Vec<QueryResult>,
    pub map: f64,
    /// Mean over eligible queries of recall@4 counts (0..=4).
    pub recall4x4: Option<f64>,
    pub query_count: usize,
    pub recall_query_count: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl EvalResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query,average_precision,recall4\n");
        for q in &self.per_query {
            let r = q.recall4.map(|r| r.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", q.id, q.average_precision, r);
        }
        let r = self.recall4x4.map(|r| r.to_string()).unwrap_or_default();
        let _ = writeln!(out, "mean,{},{}", self.map, r);
        out
    }
}

/// Ranks every query against the index and aggregates the metrics.
pub fn evaluate(index: &DescriptorIndex, queries: &[EvalQuery]) -> Result<EvalResult> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries to evaluate".into()));
    }
    let per_query: Vec<QueryResult> = queries
        .par_iter()
        .map(|q| {
            let ranking = rank(&q.descriptor, Some(q.id), index)?;
            let relevant: HashSet<u32> = q.relevant.iter().copied().collect();
            let ap = average_precision(&ranking, &relevant)?;
            let r4 = (relevant.len() == 4).then(|| recall4(&ranking, &relevant));
            Ok(QueryResult {
                id: q.id,
                average_precision: ap,
                recall4: r4,
            })
        })
        .collect::<Result<_>>()?;

    let map = per_query.iter().map(|q| q.average_precision).sum::<f64>() / per_query.len() as f64;
    let eligible: Vec<u32> = per_query.iter().filter_map(|q| q.recall4).collect();
    let mut warnings = Vec::new();
    let excluded = per_query.len() - eligible.len();
    if excluded > 0 {
        let msg = format!("{excluded} queries without exactly 4 relevant items excluded from recall@4");
        log::info!("{msg}");
        warnings.push(msg);
    }
    let recall4x4 = (!eligible.is_empty())
        .then(|| eligible.iter().map(|&r| r as f64).sum::<f64>() / eligible.len() as f64);
    Ok(EvalResult {
        query_count: per_query.len(),
        recall_query_count: eligible.len(),
        per_query,
        map,
        recall4x4,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(values: &[f64]) -> Descriptor {
        Descriptor {
            values: values.to_vec(),
            kind: PoolingKind::Sqp,
            width: 1,
            height: 1,
        }
    }

    fn set(ids: &[u32]) -> HashSet<u32> {
        ids.iter().copied().collect()
    }

    #[test]
    fn similarity_examples() {
        assert!((similarity(&d(&[3.0, 4.0]), &d(&[3.0, 4.0])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(similarity(&d(&[1.0, 0.0]), &d(&[0.0, 1.0])).unwrap(), 0.0);
        let k = similarity(&d(&[1.0, 2.0, 2.0]), &d(&[2.0, 1.0, 2.0])).unwrap();
        assert!((k - 8.0 / 9.0).abs() < 1e-15);
        assert_eq!(similarity(&d(&[0.0, 0.0]), &d(&[1.0, 1.0])).unwrap(), 0.0);
        assert!(similarity(&d(&[1.0]), &d(&[1.0, 2.0])).is_err());
        let mut r = d(&[1.0, 2.0]);
        r.kind = PoolingKind::Rmac;
        assert!(similarity(&d(&[1.0, 2.0]), &r).is_err());
    }

    #[test]
    fn literal_mode_grows_with_energy() {
        let x = d(&[1.0, 2.0, 2.0]);
        assert_eq!(similarity_with(&x, &x, SimilarityMode::Literal).unwrap(), 81.0);
    }

    #[test]
    fn rank_rules() {
        let mut index = DescriptorIndex::new(PoolingKind::Sqp);
        index.insert(5, 0, d(&[1.0, 0.0])).unwrap();
        index.insert(3, 0, d(&[2.0, 0.0])).unwrap();
        index.insert(9, 1, d(&[0.0, 1.0])).unwrap();
        index.insert(1, 1, d(&[0.6, 0.8])).unwrap();
        // 3 and 5 tie at K = 1; lower id first.
        assert_eq!(rank(&d(&[1.0, 0.0]), None, &index).unwrap(), vec![3, 5, 1, 9]);
        assert_eq!(rank(&d(&[1.0, 0.0]), Some(3), &index).unwrap(), vec![5, 1, 9]);
        assert!(index.insert(5, 0, d(&[1.0, 0.0])).is_err());
        assert!(index.insert(6, 0, d(&[1.0])).is_err());
        let empty = DescriptorIndex::new(PoolingKind::Sqp);
        assert!(rank(&d(&[1.0, 0.0]), None, &empty).unwrap().is_empty());
    }

    #[test]
    fn ap_examples() {
        let (a, x, b) = (1, 2, 3);
        let ap = average_precision(&[a, x, b], &set(&[a, b])).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[1, 2, 3, 4], &set(&[1, 2])).unwrap(), 1.0);
        assert_eq!(average_precision(&[1, 2, 3, 4], &set(&[8])).unwrap(), 0.0);
        assert!(average_precision(&[1], &set(&[])).is_err());
    }

    #[test]
    fn recall4_examples() {
        assert_eq!(recall4(&[1, 9, 2, 3, 4], &set(&[1, 2, 3, 4])), 3);
        assert_eq!(recall4(&[4, 3, 2, 1], &set(&[1, 2, 3, 4])), 4);
    }

    #[test]
    fn evaluate_excludes_non_four_queries_from_recall() {
        let mut index = DescriptorIndex::new(PoolingKind::Sqp);
        for i in 0..6u32 {
            index.insert(i, i / 3, d(&[1.0 + i as f64, (i % 3) as f64])).unwrap();
        }
        let q = |id, rel: &[u32]| EvalQuery {
            id,
            descriptor: d(&[1.0, 0.5]),
            relevant: rel.to_vec(),
        };
        let r = evaluate(&index, &[q(100, &[0, 1, 2, 3]), q(101, &[4])]).unwrap();
        assert_eq!(r.query_count, 2);
        assert_eq!(r.recall_query_count, 1);
        assert_eq!(r.warnings.len(), 1);
        let mean = (r.per_query[0].average_precision + r.per_query[1].average_precision) / 2.0;
        assert_eq!(r.map, mean);
        assert!(r.to_csv().lines().last().unwrap().starts_with("mean,"));
    }
}
