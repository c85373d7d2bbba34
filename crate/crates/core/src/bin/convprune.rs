use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use convprune::dataset::{RetrievalDataset, Split};
use convprune::finetune::{finetune, train_baseline, Mining};
use convprune::network::{ArchitectureSpec, NetworkModel};
use convprune::pipeline::{compute_salience, evaluate_descriptors, extract_split, run_pipeline, ExperimentConfig};
use convprune::pooling::{DescriptorSet, PoolingKind};
use convprune::pruner::{apply_pruning, PruneReport};
use convprune::retrieval::EvalResult;
use convprune::salience::Heuristic;
use convprune::synth::{gen_dataset, SynthSpec};
use convprune::{Error, Result};

#[derive(Parser)]
#[command(name = "convprune", version, about = "Edge pruning of CNN retrieval descriptors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic instance-retrieval dataset.
    GenDataset(GenArgs),
    /// Train a baseline network from scratch.
    Train(Common),
    /// Prune a model with one heuristic.
    Prune(Common),
    /// Fine-tune a (pruned) model with the triplet loss.
    Finetune(Common),
    /// Compute descriptors for a split.
    Extract(ExtractArgs),
    /// Score queries against the index split.
    Evaluate(EvaluateArgs),
    /// Render a prune report or evaluation result as CSV or JSON.
    Report(ReportArgs),
    /// Run the full prune / fine-tune sweep.
    #[command(alias = "pipeline")]
    Run(Common),
}

fn parse_keep(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("keep fraction must be in (0, 1], got {v}"))
    }
}

fn parse_positive(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("expected a positive number, got {v}"))
    }
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(Heuristic))]
    heuristic: Vec<Heuristic>,
    #[arg(long, value_parser = parse_keep)]
    keep: Vec<f64>,
    #[arg(long, value_parser = clap::value_parser!(PoolingKind))]
    pooling: Vec<PoolingKind>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    epochs: Option<u32>,
    #[arg(long, value_parser = parse_positive)]
    margin: Option<f64>,
    #[arg(long = "lr", value_parser = parse_positive)]
    learning_rate: Option<f64>,
    #[arg(long)]
    triplets_per_epoch: Option<usize>,
    #[arg(long, value_enum)]
    mining: Option<MiningArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Input model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output file (train, prune, finetune) or results root (run).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Experiment name, used as the results subdirectory.
    #[arg(long)]
    name: Option<String>,
    /// Architecture JSON for `train`; defaults to tinynet.
    #[arg(long)]
    arch: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MiningArg {
    Random,
    Hard,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40, value_parser = clap::value_parser!(u32).range(2..))]
    instances: u32,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(2..))]
    images_per_instance: u32,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Index,
    Query,
    All,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "sqp", value_parser = clap::value_parser!(PoolingKind))]
    pooling: PoolingKind,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    /// Descriptor `.bin` path; a `.json` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset providing queries and relevance.
    #[arg(long)]
    data: PathBuf,
    /// Precomputed descriptors covering the index and query splits.
    #[arg(long, conflicts_with = "model")]
    descriptors: Option<PathBuf>,
    #[arg(long, required_unless_present = "descriptors")]
    model: Option<PathBuf>,
    #[arg(long, default_value = "sqp", value_parser = clap::value_parser!(PoolingKind))]
    pooling: PoolingKind,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Write the result as JSON here; prints a summary either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct ReportArgs {
    /// A prune report or evaluation result (JSON).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn experiment_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => at(p, ExperimentConfig::load(p))?,
        None => ExperimentConfig::default(),
    };
    if !c.heuristic.is_empty() {
        cfg.heuristics = c.heuristic.clone();
    }
    if !c.keep.is_empty() {
        cfg.keep_fractions = c.keep.clone();
    }
    if !c.pooling.is_empty() {
        cfg.poolings = c.pooling.clone();
    }
    if let Some(v) = c.epochs {
        cfg.finetune.epochs = v as usize;
    }
    if let Some(v) = c.margin {
        cfg.finetune.margin = v;
    }
    if let Some(v) = c.learning_rate {
        cfg.finetune.learning_rate = v;
    }
    if let Some(v) = c.triplets_per_epoch {
        cfg.finetune.triplets_per_epoch = v;
    }
    if let Some(m) = c.mining {
        cfg.finetune.mining = match m {
            MiningArg::Random => Mining::Random,
            MiningArg::Hard => Mining::Hard,
        };
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.finetune.seed = s;
    }
    if let Some(n) = &c.name {
        cfg.name = n.clone();
    }
    if c.data.is_some() {
        cfg.data = c.data.clone();
    }
    if c.model.is_some() {
        cfg.model = c.model.clone();
    }
    if c.out.is_some() {
        cfg.out = c.out.clone();
    }
    cfg.validate()?;
    cfg.finetune.pooling = cfg.pooling(cfg.poolings[0]);
    Ok(cfg)
}

/// Reports a usage problem the derive attributes cannot express and exits
/// with status 2.
fn usage_error(kind: ErrorKind, msg: String) -> ! {
    Cli::command().error(kind, msg).exit()
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> &'a Path {
    p.as_deref()
        .unwrap_or_else(|| usage_error(ErrorKind::MissingRequiredArgument, format!("--{flag} is required (flag or config)")))
}

fn single<T: Copy>(values: &[T], flag: &str) -> T {
    match values {
        [v] => *v,
        _ => usage_error(
            ErrorKind::ValueValidation,
            format!("exactly one {flag} expected, got {}", values.len()),
        ),
    }
}

/// Prefixes I/O errors with the file they concern.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn load_model(path: &Path) -> Result<NetworkModel> {
    at(path, NetworkModel::load(path))
}

fn load_dataset(path: &Path) -> Result<RetrievalDataset> {
    at(path, RetrievalDataset::load(path))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let spec = SynthSpec {
        instances: a.instances as usize,
        images_per_instance: a.images_per_instance as usize,
        shape: [a.channels, a.size, a.size],
        seed: a.seed,
        ..SynthSpec::default()
    };
    let ds = gen_dataset(&spec, &a.out)?;
    println!("wrote {} images to {}", ds.items().len(), a.out.display());
    Ok(())
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = experiment_config(c)?;
    let dataset = load_dataset(require(&cfg.data, "data"))?;
    let out = require(&cfg.out, "out");
    let arch = match &c.arch {
        Some(p) => ArchitectureSpec::from_json(&fs::read_to_string(p)?)?,
        None => ArchitectureSpec::tinynet(),
    };
    let (model, log) = train_baseline(&arch, &dataset, &cfg.finetune)?;
    model.save(out)?;
    fs::write(with_suffix(out, ".log.jsonl"), log.to_jsonl())?;
    println!("saved baseline to {}", out.display());
    Ok(())
}

fn cmd_prune(c: &Common) -> Result<()> {
    let cfg = experiment_config(c)?;
    let heuristic = single(&cfg.heuristics, "--heuristic");
    let keep = single(&cfg.keep_fractions, "--keep");
    let model = load_model(require(&cfg.model, "model"))?;
    let out = require(&cfg.out, "out");
    let salience = match heuristic {
        Heuristic::H1 => convprune::salience::salience_h1(&model),
        _ => {
            let dataset = load_dataset(require(&cfg.data, "data"))?;
            compute_salience(&model, heuristic, &dataset, &cfg, &cfg.finetune.pooling)?
        }
    };
    let (pruned, report) = apply_pruning(&model, &salience, keep)?;
    pruned.save(out)?;
    write_json(&with_suffix(out, ".report.json"), &report)?;
    println!(
        "kept {}/{} weights (achieved {:.6}, target {})",
        report.remaining_weights, report.total_weights, report.achieved_keep, keep
    );
    Ok(())
}

fn cmd_finetune(c: &Common) -> Result<()> {
    let cfg = experiment_config(c)?;
    let dataset = load_dataset(require(&cfg.data, "data"))?;
    let model = load_model(require(&cfg.model, "model"))?;
    let out = require(&cfg.out, "out");
    let (tuned, log) = finetune(&model, &dataset, &cfg.finetune)?;
    tuned.save(out)?;
    fs::write(with_suffix(out, ".log.jsonl"), log.to_jsonl())?;
    if let Some(last) = log.epochs.last() {
        println!("final epoch loss {:.6}", last.mean_loss);
    }
    Ok(())
}

fn pooling_config(kind: PoolingKind, levels: usize) -> convprune::PoolingConfig {
    convprune::PoolingConfig { kind, levels }
}

fn cmd_extract(a: &ExtractArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let dataset = load_dataset(&a.data)?;
    let split = match a.split {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Index => Some(Split::Index),
        SplitArg::Query => Some(Split::Query),
        SplitArg::All => None,
    };
    let set = extract_split(&model, &dataset, split, &pooling_config(a.pooling, a.levels))?;
    set.save(&a.out)?;
    println!("wrote {} {} descriptors to {}", set.entries.len(), set.kind, a.out.display());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    let set = match (&a.descriptors, &a.model) {
        (Some(d), _) => at(d, DescriptorSet::load(d))?,
        (None, Some(m)) => {
            let model = load_model(m)?;
            extract_split(&model, &dataset, None, &pooling_config(a.pooling, a.levels))?
        }
        (None, None) => unreachable!("clap requires one of them"),
    };
    let result = evaluate_descriptors(&set, &dataset)?;
    if let Some(out) = &a.out {
        write_json(out, &result)?;
    }
    match result.recall4x4 {
        Some(r) => println!("mAP {:.6}  4xrecall@4 {:.4}  ({} queries)", result.map, r, result.query_count),
        None => println!("mAP {:.6}  ({} queries)", result.map, result.query_count),
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let text = at(&a.input, fs::read_to_string(&a.input).map_err(Error::from))?;
    let rendered = if let Ok(r) = serde_json::from_str::<PruneReport>(&text) {
        match a.format {
            Format::Csv => r.to_csv(),
            Format::Json => serde_json::to_string_pretty(&r)?,
        }
    } else if let Ok(r) = serde_json::from_str::<EvalResult>(&text) {
        match a.format {
            Format::Csv => r.to_csv(),
            Format::Json => serde_json::to_string_pretty(&r)?,
        }
    } else {
        return Err(Error::InvalidArgument(format!(
            "{} is neither a prune report nor an evaluation result",
            a.input.display()
        )));
    };
    match &a.out {
        Some(p) => fs::write(p, rendered)?,
        None => print!("{rendered}"),
    }
    Ok(())
}

fn cmd_run(c: &Common) -> Result<()> {
    let cfg = experiment_config(c)?;
    let out = run_pipeline(&cfg)?;
    println!("{} result rows in {}", out.rows.len(), out.dir.display());
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CONVPRUNE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("CONVPRUNE_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::GenDataset(a) => cmd_gen(a),
        Command::Train(c) => cmd_train(c),
        Command::Prune(c) => cmd_prune(c),
        Command::Finetune(c) => cmd_finetune(c),
        Command::Extract(a) => cmd_extract(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
        Command::Run(c) => cmd_run(c),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
