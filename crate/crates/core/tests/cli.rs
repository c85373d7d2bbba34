use std::path::Path;
use std::process::{Command, Output};

use convprune::network::{init_network, ArchitectureSpec, NetworkModel};
use convprune::pooling::{DescriptorSet, PoolingKind};
use convprune::synth::{gen_dataset, SynthSpec};

fn convprune(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convprune"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

/// Untrained tinynet and a dataset whose query images are exact copies of
/// their index images (no rendering jitter, two images per instance).
fn fixture(dir: &Path) {
    let spec = SynthSpec {
        instances: 8,
        images_per_instance: 2,
        max_translation: 0.0,
        scale_range: (1.0, 1.0),
        brightness_range: (1.0, 1.0),
        noise_sigma: 0.0,
        ..Default::default()
    };
    gen_dataset(&spec, dir.join("data")).unwrap();
    init_network(&ArchitectureSpec::tinynet(), 1).unwrap().save(dir.join("base.cpm")).unwrap();
}

#[test]
fn prune_hits_the_requested_fraction() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    ok(&convprune(&["prune", "--model", "base.cpm", "--heuristic", "h1", "--keep", "0.5", "--out", "half.cpm"], tmp.path()));
    let pruned = NetworkModel::load(tmp.path().join("half.cpm")).unwrap();
    let n = pruned.conv_weight_count() as f64;
    assert!((pruned.unmasked_weight_count() as f64 - 0.5 * n).abs() <= 1.0);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("half.cpm.report.json")).unwrap()).unwrap();
    assert_eq!(report["remaining_weights"].as_u64().unwrap() as usize, pruned.unmasked_weight_count());

    ok(&convprune(&["report", "--input", "half.cpm.report.json", "--out", "layers.csv"], tmp.path()));
    let csv = std::fs::read_to_string(tmp.path().join("layers.csv")).unwrap();
    assert!(csv.lines().count() > pruned.conv_layers().count());
}

#[test]
fn evaluate_planted_duplicates_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    ok(&convprune(&["evaluate", "--data", "data", "--model", "base.cpm", "--out", "eval.json"], tmp.path()));
    let eval: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["map"].as_f64().unwrap(), 1.0);
    assert_eq!(eval["query_count"].as_u64().unwrap(), 4);
}

#[test]
fn extract_tags_descriptors_with_their_pooling() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    for p in ["sqp", "rmac"] {
        let out = format!("{p}.bin");
        ok(&convprune(&["extract", "--model", "base.cpm", "--data", "data", "--pooling", p, "--out", &out], tmp.path()));
    }
    let sqp = DescriptorSet::load(tmp.path().join("sqp.bin")).unwrap();
    let rmac = DescriptorSet::load(tmp.path().join("rmac.bin")).unwrap();
    assert_eq!(sqp.kind, PoolingKind::Sqp);
    assert_eq!(rmac.kind, PoolingKind::Rmac);
    assert_eq!(sqp.entries.len(), 16);
    assert_ne!(sqp.entries[0].values, rmac.entries[0].values);

    ok(&convprune(&["evaluate", "--data", "data", "--descriptors", "rmac.bin", "--out", "e.json"], tmp.path()));
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    for bad in [
        &["prune", "--model", "base.cpm", "--heuristic", "h1", "--keep", "1.5", "--out", "x.cpm"][..],
        &["prune", "--model", "base.cpm", "--heuristic", "h9", "--keep", "0.5", "--out", "x.cpm"],
        &["prune", "--heuristic", "h1", "--keep", "0.5", "--out", "x.cpm"],
        &["extract", "--model", "base.cpm", "--data", "data", "--pooling", "gem", "--out", "x.bin"],
        &["no-such-command"],
    ] {
        let out = convprune(bad, tmp.path());
        assert_eq!(out.status.code(), Some(2), "{bad:?}");
    }
    let missing = convprune(&["prune", "--model", "absent.cpm", "--heuristic", "h1", "--keep", "0.5", "--out", "x.cpm"], tmp.path());
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.cpm"));

    std::fs::write(tmp.path().join("junk.cpm"), b"not a model").unwrap();
    let junk = convprune(&["prune", "--model", "junk.cpm", "--heuristic", "h1", "--keep", "0.5", "--out", "x.cpm"], tmp.path());
    assert_eq!(junk.status.code(), Some(1));
}
