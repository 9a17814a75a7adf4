use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::Serialize;
use vamkit::checkpoint::load_checkpoint;
use vamkit::gradcheck::{gradcheck as run_gradcheck, Scope};
use vamkit::retrieval::{evaluate, run_ablation, AblationSpec, CellError, KAccuracy, Task};
use vamkit::synth::{generate_dataset, load_dataset, sha256_hex, Dataset, GenerateOptions, Split};
use vamkit::training::{train as run_train, TrainOutput};
use vamkit::{desk, Error, GateMode};

use crate::config::RunConfigFile;
use crate::Outcome;

/// Bad flags, unreadable inputs, or invalid configuration (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn library_exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. }
        | Error::NonFiniteGradient(_)
        | Error::NonFinite(_)
        | Error::TraceMismatch(_)
        | Error::AttentionOutOfRange { .. } => 1,
        _ => 2,
    }
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(lib) = cause.downcast_ref::<Error>() {
            return library_exit_code(lib);
        }
        if let Some(cell) = cause.downcast_ref::<CellError>() {
            return library_exit_code(&cell.source);
        }
    }
    2
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut json = serde_json::to_vec_pretty(value)?;
    json.push(b'\n');
    fs::write(path, json).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn open_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    if !dir.is_dir() {
        anyhow::bail!(UsageError(format!("dataset directory {} does not exist", dir.display())));
    }
    Ok(load_dataset(dir)?)
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    items: usize,
    /// Consumer views per item.
    #[arg(long)]
    consumers: usize,
    /// Shop views per item; the in-shop task needs at least 2.
    #[arg(long, default_value_t = 1)]
    shops: usize,
    /// Image extents as HxW.
    #[arg(long, value_parser = parse_size, default_value = "32x32")]
    size: (usize, usize),
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn gen_data(a: GenDataArgs) -> anyhow::Result<Outcome> {
    let opts = GenerateOptions {
        shops_per_item: a.shops,
        ..GenerateOptions::new(a.items, a.consumers, a.size, a.seed)
    };
    let m = generate_dataset(&opts, &a.out)?;
    let manifest_path = a.out.join("manifest.json");
    let bytes = fs::read(&manifest_path).with_context(|| format!("reading {}", manifest_path.display()))?;
    let train = m.items.iter().filter(|i| i.split == Split::Train).count();
    let shop: usize = m.items.iter().map(|i| i.shop.len()).sum();
    let consumer: usize = m.items.iter().map(|i| i.consumer.len()).sum();
    println!("dataset written to {}", a.out.display());
    println!("items: {} (train {train}, test {})", m.items.len(), m.items.len() - train);
    println!("images: {} (shop {shop}, consumer {consumer}), masks: {}", shop + consumer, shop + consumer);
    println!("gallery: {} shop images, queries: {} consumer images", m.gallery().len(), m.queries().len());
    println!("extents: {}x{}, seed {}", m.extents[0], m.extents[1], m.seed);
    println!("manifest sha256: {}", sha256_hex(&bytes));
    Ok(Outcome::Success)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory; overrides the config's `dataset`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint directory; also receives metrics.jsonl.
    #[arg(long)]
    out: PathBuf,
}

pub fn train(a: TrainArgs) -> anyhow::Result<Outcome> {
    let cfg = RunConfigFile::load(&a.config)?;
    let data = a
        .data
        .or_else(|| cfg.dataset.clone())
        .ok_or_else(|| UsageError("no dataset: pass --data or set \"dataset\" in the config".into()))?;
    let ds = open_dataset(&data)?;
    let hash = cfg.hash();
    println!("config {hash}");
    let outcome = run_train(
        &ds,
        &cfg.network,
        &cfg.train,
        TrainOutput {
            dir: Some(&a.out),
            config_hash: Some(hash),
        },
    )?;
    for m in &outcome.history {
        println!("epoch {:>4}  mean_loss {:.6}", m.epoch, m.mean_loss);
    }
    println!(
        "trained on {} items, {} triplets per epoch; checkpoint and metrics.jsonl in {}",
        outcome.items.len(),
        outcome.triplets_per_epoch,
        a.out.display()
    );
    Ok(Outcome::Success)
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated k values.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
    k: Vec<usize>,
    #[arg(long, default_value = "c2s")]
    task: Task,
    /// Report path; defaults to `<ckpt>/eval_<task>.json`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct EvalFile {
    config_hash: Option<String>,
    epoch: usize,
    task: Task,
    queries: usize,
    gallery: usize,
    accuracy: Vec<KAccuracy>,
}

pub fn eval(a: EvalArgs) -> anyhow::Result<Outcome> {
    if !a.ckpt.is_dir() {
        anyhow::bail!(UsageError(format!("checkpoint directory {} does not exist", a.ckpt.display())));
    }
    let (net, manifest) = load_checkpoint(&a.ckpt)?;
    let ds = open_dataset(&a.data)?;
    let report = evaluate(&net, &ds, a.task, &a.k)?;
    println!(
        "task {}: {} queries, {} gallery images",
        report.task.as_str(),
        report.queries,
        report.gallery
    );
    for acc in &report.accuracy {
        println!("top-{:<4} {:.4}", acc.k, acc.accuracy);
    }
    let path = a
        .report
        .unwrap_or_else(|| a.ckpt.join(format!("eval_{}.json", a.task.as_str())));
    write_json(
        &path,
        &EvalFile {
            config_hash: manifest.config_hash.clone(),
            epoch: manifest.epoch,
            task: report.task,
            queries: report.queries,
            gallery: report.gallery,
            accuracy: report.accuracy,
        },
    )?;
    println!("report written to {}", path.display());
    Ok(Outcome::Success)
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "layer")]
    scope: Scope,
    /// Parameters sampled per network-scope group.
    #[arg(long, default_value_t = 20)]
    params: usize,
}

pub fn gradcheck(a: GradcheckArgs) -> anyhow::Result<Outcome> {
    let report = run_gradcheck(a.scope, a.seed, a.params)?;
    print!("{}", report.to_text());
    Ok(if report.passed() {
        println!("all checks passed");
        Outcome::Success
    } else {
        println!("gradient check FAILED");
        Outcome::CheckFailed
    })
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Base network and training config; defaults to the desk settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "impdrop,product,none")]
    modes: Vec<GateMode>,
    /// Overrides the config's train_fraction.
    #[arg(long)]
    fraction: Option<f64>,
    /// Number of seeds, counting up from the config's training seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Overrides the config's triplet margin.
    #[arg(long)]
    margin: Option<f32>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
    k: Vec<usize>,
    #[arg(long, default_value = "c2s")]
    task: Task,
    #[arg(long, default_value = "ablation.json")]
    report: PathBuf,
}

pub fn ablate(a: AblateArgs) -> anyhow::Result<Outcome> {
    let mut cfg = match &a.config {
        Some(p) => RunConfigFile::load(p)?,
        None => {
            let preset = desk::attention_ablation();
            RunConfigFile {
                dataset: None,
                network: preset.network,
                train: preset.train,
            }
        }
    };
    if let Some(f) = a.fraction {
        cfg.train.train_fraction = f;
    }
    if let Some(m) = a.margin {
        cfg.train.margin = m;
    }
    cfg.validate()?;
    if a.seeds == 0 {
        anyhow::bail!(UsageError("--seeds must be at least 1".into()));
    }
    let ds = open_dataset(&a.data)?;
    let base = cfg.train.seed;
    let spec = AblationSpec {
        network: cfg.network,
        train: cfg.train,
        modes: a.modes,
        seeds: (base..base + a.seeds).collect(),
        ks: a.k,
        task: a.task,
    };
    let report = run_ablation(&ds, &spec)?;
    print!("{}", report.to_text());
    write_json(&a.report, &report)?;
    println!("config {}", report.config_hash);
    println!("report written to {}", a.report.display());
    Ok(Outcome::Success)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("32x24"), Ok((32, 24)));
        assert_eq!(parse_size("16X16"), Ok((16, 16)));
        assert!(parse_size("32").is_err());
        assert!(parse_size("ax3").is_err());
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        let usage = anyhow::Error::new(UsageError("x".into()));
        assert_eq!(exit_code(&usage), 2);
        let io = anyhow::Error::new(Error::Config("bad".into()));
        assert_eq!(exit_code(&io), 2);
        let diverged = anyhow::Error::new(Error::Diverged { epoch: 0, loss: 9.0 }).context("training");
        assert_eq!(exit_code(&diverged), 1);
    }
}
