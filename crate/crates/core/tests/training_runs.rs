use std::fs;
use std::path::Path;

use vamkit::checkpoint::load_checkpoint;
use vamkit::desk;
use vamkit::synth::{generate_dataset, load_dataset, Dataset, GenerateOptions};
use vamkit::training::{train, train_from, training_items, TrainConfig, TrainOutput};
use vamkit::{AttentionSource, EmbeddingNet, GateMode, NetworkConfig, Phase, StreamKey};

fn small_dataset(dir: &Path, items: usize) -> Dataset {
    generate_dataset(&GenerateOptions::new(items, 2, (32, 32), 5), dir).unwrap();
    load_dataset(dir).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_triplets: 16,
        negatives_per_pair: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn same_config_and_seed_give_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path(), 8);
    let a = train(&ds, &NetworkConfig::default(), &quick(), TrainOutput::default()).unwrap();
    let b = train(&ds, &NetworkConfig::default(), &quick(), TrainOutput::default()).unwrap();
    assert_eq!(a.losses(), b.losses());
    assert_eq!(a.net, b.net);
    let other = train(&ds, &NetworkConfig::default(), &TrainConfig { seed: 1, ..quick() }, TrainOutput::default()).unwrap();
    assert_ne!(a.losses(), other.losses());
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path(), 8);
    let cfg = NetworkConfig {
        gate_mode: GateMode::Product,
        ..NetworkConfig::default()
    };
    let net = EmbeddingNet::build(cfg, StreamKey::root(3)).unwrap();
    let train_cfg = TrainConfig {
        learning_rate: 0.0,
        resample_negatives: false,
        ..quick()
    };
    let out = train_from(&ds, net.clone(), &train_cfg, TrainOutput::default()).unwrap();
    assert_eq!(out.net, net);
    let losses = out.losses();
    assert!(losses.iter().all(|&l| l == losses[0]), "{losses:?}");
}

#[test]
fn both_branches_see_the_same_upper_weights_after_training() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path(), 8);
    let cfg = NetworkConfig {
        gate_mode: GateMode::None,
        attention_source: AttentionSource::LearnedHead,
        ..NetworkConfig::default()
    };
    let out = train(&ds, &cfg, &TrainConfig { epochs: 1, ..quick() }, TrainOutput::default()).unwrap();
    let initial = EmbeddingNet::build(cfg, StreamKey::root(0).label("init")).unwrap();
    assert_ne!(out.net, initial, "training moved the weights");
    let img = ds.image(&ds.manifest.gallery()[0]).unwrap();
    let e = out.net.embed_one(&img, Phase::Eval, StreamKey::root(0), None).unwrap();
    let (g, a) = e.halves();
    assert_eq!(g, a);
}

#[test]
fn train_fraction_selects_ceil_items_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(dir.path(), 22);
    let n_train = training_items(&ds.manifest, &TrainConfig::default()).unwrap().items.len();
    assert_eq!(n_train, 11);
    for (fraction, want) in [(0.1, 2), (0.25, 3), (0.5, 6), (1.0, 11)] {
        let cfg = TrainConfig {
            train_fraction: fraction,
            ..TrainConfig::default()
        };
        let a = training_items(&ds.manifest, &cfg).unwrap();
        let b = training_items(&ds.manifest, &cfg).unwrap();
        assert_eq!(a.items.len(), want, "fraction {fraction}");
        assert_eq!(a, b);
    }
}

#[test]
fn checkpoint_and_metrics_record_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(&dir.path().join("data"), 8);
    let ckpt = dir.path().join("ckpt");
    let out = train(
        &ds,
        &NetworkConfig::default(),
        &quick(),
        TrainOutput {
            dir: Some(&ckpt),
            config_hash: Some("abc".into()),
        },
    )
    .unwrap();
    let (net, manifest) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(net, out.net);
    assert_eq!(manifest.loss_history, out.losses());
    assert_eq!(manifest.epoch, 3);
    assert_eq!(manifest.config_hash.as_deref(), Some("abc"));
    let metrics = fs::read_to_string(ckpt.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for (i, line) in lines.iter().enumerate() {
        assert_eq!(line["epoch"], i);
        assert_eq!(line["mean_loss"].as_f64().unwrap(), out.history[i].mean_loss);
        assert!(line["timestamp"].is_number());
    }
}

/// Initial and final epoch losses of the default desk run, recorded once.
const DESK_SMOKE_LOSSES: (f64, f64) = (0.12544155366647627, 0.0010898449470134316);

#[test]
fn default_desk_run_lowers_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&desk::dataset(), dir.path()).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let out = train(&ds, &NetworkConfig::default(), &TrainConfig::default(), TrainOutput::default()).unwrap();
    let losses = out.losses();
    let (first, last) = (losses[0], *losses.last().unwrap());
    eprintln!("desk smoke run: initial {first:?} final {last:?}");
    assert_eq!(losses.len(), 20);
    assert!(last < first);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * b.abs();
    assert!(
        close(first, DESK_SMOKE_LOSSES.0) && close(last, DESK_SMOKE_LOSSES.1),
        "regression fixture {DESK_SMOKE_LOSSES:?} vs ({first:?}, {last:?})"
    );
}
