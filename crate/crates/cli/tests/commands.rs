use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vamkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vamkit"))
        .args(args)
        .env_remove("VAMKIT_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(o.status.code(), Some(0), "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_data(out: &Path, items: usize, consumers: usize, seed: u64) -> Output {
    vamkit(&[
        "gen-data",
        "--out",
        s(out),
        "--items",
        &items.to_string(),
        "--consumers",
        &consumers.to_string(),
        "--size",
        "32x32",
        "--seed",
        &seed.to_string(),
    ])
}

fn manifest_sha(o: &Output) -> String {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix("manifest sha256: "))
        .expect("summary names the manifest hash")
        .to_string()
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p
}

const QUICK: &str = r#"{"train": {"epochs": 2, "batch_triplets": 16, "negatives_per_pair": 3}}"#;

fn metrics_losses(ckpt: &Path) -> Vec<f64> {
    fs::read_to_string(ckpt.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["mean_loss"].as_f64().unwrap())
        .collect()
}

#[test]
fn gen_data_counts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = ok(gen_data(&a, 2, 1, 7));
    let second = ok(gen_data(&b, 2, 1, 7));
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 4);
    assert_eq!(fs::read_dir(a.join("masks")).unwrap().count(), 4);
    assert!(stdout(&first).contains("images: 4 (shop 2, consumer 2), masks: 4"), "{}", stdout(&first));
    assert_eq!(manifest_sha(&first), manifest_sha(&second));
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    let other = ok(gen_data(&dir.path().join("c"), 2, 1, 8));
    assert_ne!(manifest_sha(&first), manifest_sha(&other));
}

#[test]
fn gen_data_rejects_tiny_extents() {
    let dir = tempfile::tempdir().unwrap();
    let o = vamkit(&["gen-data", "--out", s(dir.path()), "--items", "2", "--consumers", "1", "--size", "8x8", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("extents too small"), "{}", stderr(&o));
}

#[test]
fn train_with_zero_learning_rate_keeps_the_loss_constant() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(gen_data(&data, 6, 2, 1));
    let cfg = write_config(
        dir.path(),
        "lr0.json",
        r#"{"network": {"gate_mode": "product"},
            "train": {"epochs": 3, "learning_rate": 0.0, "resample_negatives": false,
                      "batch_triplets": 16, "negatives_per_pair": 3}}"#,
    );
    let ckpt = dir.path().join("ckpt");
    ok(vamkit(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt)]));
    let losses = metrics_losses(&ckpt);
    assert_eq!(losses.len(), 3);
    assert!(losses.iter().all(|&l| l == losses[0]), "{losses:?}");
    assert!(ckpt.join("manifest.json").is_file());
}

#[test]
fn train_reads_dataset_from_config() {
    let dir = tempfile::tempdir().unwrap();
    ok(gen_data(&dir.path().join("data"), 4, 1, 1));
    let cfg = write_config(
        dir.path(),
        "run.json",
        r#"{"dataset": "data", "train": {"epochs": 1, "batch_triplets": 8, "negatives_per_pair": 2}}"#,
    );
    ok(vamkit(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("ckpt"))]));
}

#[test]
fn train_with_missing_dataset_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", QUICK);
    let missing = dir.path().join("no_such_dataset");
    let o = vamkit(&["train", "--data", s(&missing), "--config", s(&cfg), "--out", s(&dir.path().join("ckpt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
}

#[test]
fn invalid_configs_exit_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(gen_data(&data, 2, 1, 1));
    for (name, json) in [
        ("unknown.json", r#"{"train": {"epochs": 1, "learnin_rate": 0.1}}"#),
        ("odd.json", r#"{"network": {"embedding_dim": 65}}"#),
        ("momentum.json", r#"{"train": {"momentum": 1.0}}"#),
    ] {
        let cfg = write_config(dir.path(), name, json);
        let ckpt = dir.path().join(name).with_extension("ckpt");
        let o = vamkit(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt)]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", stderr(&o));
        assert!(!ckpt.exists(), "{name}: no work before validation");
    }
    let o = vamkit(&["train", "--config", s(&write_config(dir.path(), "q.json", QUICK)), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "no dataset given");
}

#[test]
fn bad_thread_settings_are_usage_errors() {
    let o = Command::new(env!("CARGO_BIN_EXE_vamkit"))
        .args(["gradcheck", "--scope", "layer"])
        .env("VAMKIT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("VAMKIT_THREADS"));
    assert_eq!(vamkit(&["--threads", "0", "gradcheck"]).status.code(), Some(2));
}

#[test]
fn eval_sorts_k_and_full_gallery_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(gen_data(&data, 8, 2, 3));
    let cfg = write_config(dir.path(), "c.json", QUICK);
    let ckpt = dir.path().join("ckpt");
    ok(vamkit(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt)]));

    // 8 items, 4 in test, one shop image each: the gallery has 4 entries.
    let o = ok(vamkit(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--k", "4,1,2"]));
    let text = stdout(&o);
    let ks: Vec<&str> = text
        .lines()
        .filter_map(|l| l.strip_prefix("top-"))
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(ks, ["1", "2", "4"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(ckpt.join("eval_c2s.json")).unwrap()).unwrap();
    assert_eq!(report["gallery"], 4);
    let acc: Vec<f64> = report["accuracy"].as_array().unwrap().iter().map(|a| a["accuracy"].as_f64().unwrap()).collect();
    assert_eq!(acc.len(), 3);
    assert!(acc.windows(2).all(|w| w[0] <= w[1]), "monotone in k: {acc:?}");
    assert_eq!(acc[2], 1.0);
    assert!(report["config_hash"].is_string());
}

#[test]
fn eval_rejects_mismatched_extents() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(gen_data(&data, 4, 1, 3));
    let cfg = write_config(dir.path(), "c.json", r#"{"train": {"epochs": 0}}"#);
    let ckpt = dir.path().join("ckpt");
    ok(vamkit(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt)]));
    let small = dir.path().join("small");
    ok(vamkit(&["gen-data", "--out", s(&small), "--items", "4", "--consumers", "1", "--size", "24x24", "--seed", "3"]));
    let o = vamkit(&["eval", "--ckpt", s(&ckpt), "--data", s(&small), "--k", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_is_reproducible() {
    for scope in ["layer", "network"] {
        let a = ok(vamkit(&["gradcheck", "--seed", "3", "--scope", scope]));
        let b = ok(vamkit(&["gradcheck", "--seed", "3", "--scope", scope]));
        assert_eq!(stdout(&a), stdout(&b));
        assert!(stdout(&a).contains("PASS") && !stdout(&a).contains("FAIL"), "{}", stdout(&a));
    }
}

#[test]
fn ablate_single_mode_and_reproducible_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(gen_data(&data, 8, 2, 4));
    let cfg = write_config(dir.path(), "c.json", QUICK);
    let run = |name: &str| {
        let report = dir.path().join(name);
        ok(vamkit(&[
            "ablate", "--data", s(&data), "--config", s(&cfg), "--modes", "none", "--seeds", "1", "--k", "1,2", "--report", s(&report),
        ]));
        fs::read(report).unwrap()
    };
    let (a, b) = (run("a.json"), run("b.json"));
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r["mode"] == "none" && r["seed"] == 0));
    let means = v["means"].as_array().unwrap();
    assert_eq!(means.len(), 2);
    assert!(means.iter().all(|m| m["stddev"] == 0.0));
}

#[test]
fn default_config_training_lowers_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(vamkit(&["gen-data", "--out", s(&data), "--items", "64", "--consumers", "4", "--size", "32x32", "--seed", "2024"]));
    let cfg = write_config(dir.path(), "default.json", "{}");
    let ckpt = dir.path().join("ckpt");
    ok(vamkit(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt)]));
    let losses = metrics_losses(&ckpt);
    assert_eq!(losses.len(), 20);
    assert!(losses[19] < losses[0], "{losses:?}");
}
