//! Experiment orchestration: prune a baseline with each heuristic at each
//! keep fraction, evaluate, fine-tune, evaluate again, and write plot-ready
//! results under `results/<experiment>/`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{RetrievalDataset, Split};
use crate::error::{Error, Result};
use crate::finetune::{derive_seed, finetune, sample_triplets, FinetuneConfig, Mining};
use crate::network::NetworkModel;
use crate::pooling::{self, DescriptorEntry, DescriptorSet, PoolingConfig, PoolingKind};
use crate::pruner::{apply_pruning, check_keep_fraction, PruneReport};
use crate::retrieval::{evaluate, DescriptorIndex, EvalQuery, EvalResult};
use crate::salience::{
    collect_activation_stats, salience_h1, salience_h2, salience_h3, salience_h4, Heuristic, SalienceMap,
    DEFAULT_H2_TRIPLETS, DEFAULT_STAT_IMAGES,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SalienceConfig {
    /// Train images used for activation statistics (H3, H4).
    pub stat_images: usize,
    /// Triplets used for the Taylor heuristic (H2).
    pub h2_triplets: usize,
}

impl Default for SalienceConfig {
    fn default() -> Self {
        Self {
            stat_images: DEFAULT_STAT_IMAGES,
            h2_triplets: DEFAULT_H2_TRIPLETS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub heuristics: Vec<Heuristic>,
    pub keep_fractions: Vec<f64>,
    pub poolings: Vec<PoolingKind>,
    pub rmac_levels: usize,
    pub finetune: FinetuneConfig,
    pub salience: SalienceConfig,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            heuristics: Heuristic::ALL.to_vec(),
            keep_fractions: vec![0.5, 0.4, 0.3, 0.2, 0.1],
            poolings: vec![PoolingKind::Sqp, PoolingKind::Rmac],
            rmac_levels: pooling::DEFAULT_RMAC_LEVELS,
            finetune: FinetuneConfig::default(),
            salience: SalienceConfig::default(),
            seed: 0,
            data: None,
            model: None,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        for &t in &self.keep_fractions {
            check_keep_fraction(t)?;
        }
        if self.heuristics.is_empty() || self.keep_fractions.is_empty() || self.poolings.is_empty() {
            return Err(Error::InvalidArgument(
                "experiment needs at least one heuristic, keep fraction and pooling".into(),
            ));
        }
        if self.rmac_levels == 0 {
            return Err(Error::InvalidArgument("R-MAC needs at least one level".into()));
        }
        self.finetune.validate()
    }

    pub fn pooling(&self, kind: PoolingKind) -> PoolingConfig {
        PoolingConfig {
            kind,
            levels: self.rmac_levels,
        }
    }
}

/// Descriptors for every item of `split`, in manifest order.
pub fn extract_split(
    model: &NetworkModel,
    dataset: &RetrievalDataset,
    split: Option<Split>,
    pooling: &PoolingConfig,
) -> Result<DescriptorSet> {
    let items: Vec<_> = dataset
        .items()
        .iter()
        .filter(|i| split.is_none_or(|s| i.split == s))
        .collect();
    let descs = items
        .par_iter()
        .map(|item| {
            let img = dataset.image(item.id).expect("manifest item has an image");
            pooling::pool(&model.forward_features(img)?, pooling)
        })
        .collect::<Result<Vec<_>>>()?;
    let [c, h, w] = model.output_shape();
    Ok(DescriptorSet {
        kind: pooling.kind,
        channels: c,
        width: w,
        height: h,
        entries: items
            .iter()
            .zip(descs)
            .map(|(item, d)| DescriptorEntry {
                id: item.id,
                label: Some(item.label),
                split: Some(
                    match item.split {
                        Split::Train => "train",
                        Split::Index => "index",
                        Split::Query => "query",
                    }
                    .into(),
                ),
                values: d.values,
            })
            .collect(),
    })
}

/// Scores the dataset's queries against its index split using precomputed
/// descriptors (matched by id).
pub fn evaluate_descriptors(set: &DescriptorSet, dataset: &RetrievalDataset) -> Result<EvalResult> {
    let lookup: std::collections::HashMap<u32, &DescriptorEntry> = set.entries.iter().map(|e| (e.id, e)).collect();
    let mut index = DescriptorIndex::new(set.kind);
    for (item, _) in dataset.split(Split::Index) {
        let e = lookup
            .get(&item.id)
            .ok_or_else(|| Error::Dataset(format!("no descriptor for index item {}", item.id)))?;
        index.insert(item.id, item.label, set.descriptor(e))?;
    }
    let queries = dataset
        .queries()
        .iter()
        .map(|q| {
            let e = lookup
                .get(&q.id)
                .ok_or_else(|| Error::Dataset(format!("no descriptor for query {}", q.id)))?;
            Ok(EvalQuery {
                id: q.id,
                descriptor: set.descriptor(e),
                relevant: q.relevant.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&index, &queries)
}

/// mAP / 4×recall@4 of `model` on the dataset's query and index splits.
pub fn evaluate_model(model: &NetworkModel, dataset: &RetrievalDataset, pooling: &PoolingConfig) -> Result<EvalResult> {
    let mut set = extract_split(model, dataset, Some(Split::Index), pooling)?;
    set.entries.extend(extract_split(model, dataset, Some(Split::Query), pooling)?.entries);
    evaluate_descriptors(&set, dataset)
}

/// Salience of `model` under `heuristic`, drawing any data it needs from the
/// dataset's train split.
pub fn compute_salience(
    model: &NetworkModel,
    heuristic: Heuristic,
    dataset: &RetrievalDataset,
    config: &ExperimentConfig,
    pooling: &PoolingConfig,
) -> Result<SalienceMap> {
    match heuristic {
        Heuristic::H1 => Ok(salience_h1(model)),
        Heuristic::H3 | Heuristic::H4 => {
            let mut ids: Vec<u32> = dataset.split(Split::Train).map(|(i, _)| i.id).collect();
            if ids.is_empty() {
                return Err(Error::Dataset("activation statistics need train images".into()));
            }
            if ids.len() > config.salience.stat_images {
                ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x5a)));
                ids.truncate(config.salience.stat_images.max(1));
            }
            let stats = collect_activation_stats(model, ids.iter().map(|id| dataset.image(*id).unwrap()))?;
            if heuristic == Heuristic::H3 {
                salience_h3(model, &stats)
            } else {
                salience_h4(model, &stats)
            }
        }
        Heuristic::H2 => {
            let triplets = sample_triplets(
                &dataset.labeled_ids(Split::Train),
                config.salience.h2_triplets.max(1),
                Mining::Random,
                derive_seed(config.seed, 0x42),
                None,
            )?;
            salience_h2(model, &triplets, dataset, pooling, config.finetune.margin)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub heuristic: Heuristic,
    pub keep: f64,
    pub pooling: PoolingKind,
    /// `before` or `after` fine-tuning.
    pub stage: String,
    pub achieved_keep: f64,
    pub remaining_weights: usize,
    pub map: f64,
    pub recall4x4: Option<f64>,
}

pub const METRICS_HEADER: &str = "heuristic,keep,pooling,stage,achieved_keep,remaining_weights,map,recall4x4";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.heuristic,
            self.keep,
            self.pooling,
            self.stage,
            self.achieved_keep,
            self.remaining_weights,
            self.map,
            self.recall4x4.map(|r| r.to_string()).unwrap_or_default()
        )
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub baseline: Vec<(PoolingKind, EvalResult)>,
    pub reports: Vec<PruneReport>,
}

fn tag(h: Heuristic, t: f64, p: PoolingKind) -> String {
    format!("{h}_t{t}_{p}")
}

/// Runs the full sweep for an already loaded baseline and dataset.
pub fn run_pipeline_with(
    config: &ExperimentConfig,
    baseline: &NetworkModel,
    dataset: &RetrievalDataset,
    results_root: &Path,
) -> Result<PipelineOutput> {
    config.validate()?;
    baseline.validate_masks()?;
    let dir = results_root.join(&config.name);
    for sub in ["models", "descriptors", "reports"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(config)?)?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    metrics.flush()?;
    let mut log = BufWriter::new(File::create(dir.join("log.jsonl"))?);

    let mut baseline_results = Vec::new();
    for &p in &config.poolings {
        let pooling = config.pooling(p);
        let set = {
            let mut s = extract_split(baseline, dataset, Some(Split::Index), &pooling)?;
            s.entries.extend(extract_split(baseline, dataset, Some(Split::Query), &pooling)?.entries);
            s
        };
        set.save(dir.join("descriptors").join(format!("baseline_{p}.bin")))?;
        let eval = evaluate_descriptors(&set, dataset)?;
        fs::write(
            dir.join("reports").join(format!("baseline_{p}_eval.json")),
            serde_json::to_vec_pretty(&eval)?,
        )?;
        baseline_results.push((p, eval));
    }

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &h in &config.heuristics {
        // Only H2 depends on the pooling; compute the others once.
        let mut shared: Option<SalienceMap> = None;
        for &p in &config.poolings {
            let pooling = config.pooling(p);
            let salience = match (h, &shared) {
                (Heuristic::H2, _) => compute_salience(baseline, h, dataset, config, &pooling)?,
                (_, Some(s)) => s.clone(),
                (_, None) => {
                    let s = compute_salience(baseline, h, dataset, config, &pooling)?;
                    shared = Some(s.clone());
                    s
                }
            };
            for &t in &config.keep_fractions {
                let name = tag(h, t, p);
                let (pruned, report) = apply_pruning(baseline, &salience, t)?;
                pruned.save(dir.join("models").join(format!("{name}_pruned.cpm")))?;
                fs::write(
                    dir.join("reports").join(format!("{name}_prune.json")),
                    serde_json::to_vec_pretty(&report)?,
                )?;
                fs::write(dir.join("reports").join(format!("{name}_layers.csv")), report.to_csv())?;

                let before = evaluate_model(&pruned, dataset, &pooling)?;
                let row = MetricsRow {
                    heuristic: h,
                    keep: t,
                    pooling: p,
                    stage: "before".into(),
                    achieved_keep: report.achieved_keep,
                    remaining_weights: report.remaining_weights,
                    map: before.map,
                    recall4x4: before.recall4x4,
                };
                writeln!(metrics, "{}", row.csv_line())?;
                metrics.flush()?;
                rows.push(row);

                let ft_config = FinetuneConfig {
                    pooling,
                    ..config.finetune.clone()
                };
                let (tuned, train_log) = finetune(&pruned, dataset, &ft_config)?;
                tuned.save(dir.join("models").join(format!("{name}_finetuned.cpm")))?;
                for e in &train_log.epochs {
                    let mut v = serde_json::to_value(e)?;
                    v["heuristic"] = serde_json::json!(h);
                    v["keep"] = serde_json::json!(t);
                    v["pooling"] = serde_json::json!(p);
                    writeln!(log, "{}", serde_json::to_string(&v)?)?;
                }
                log.flush()?;
                let after = evaluate_model(&tuned, dataset, &pooling)?;
                let row = MetricsRow {
                    stage: "after".into(),
                    map: after.map,
                    recall4x4: after.recall4x4,
                    ..rows.last().unwrap().clone()
                };
                writeln!(metrics, "{}", row.csv_line())?;
                metrics.flush()?;
                rows.push(row);
                reports.push(report);
            }
        }
    }
    Ok(PipelineOutput {
        dir,
        rows,
        baseline: baseline_results,
        reports,
    })
}

/// Loads the dataset and baseline named in `config` and runs the sweep into
/// `config.out` (default `results`).
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineOutput> {
    let data = config
        .data
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("pipeline needs a dataset path (--data)".into()))?;
    let model = config
        .model
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("pipeline needs a baseline model (--model)".into()))?;
    let dataset = RetrievalDataset::load(data)?;
    let baseline = NetworkModel::load(model)?;
    let root = config.out.clone().unwrap_or_else(|| PathBuf::from("results"));
    run_pipeline_with(config, &baseline, &dataset, &root)
}
