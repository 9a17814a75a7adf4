//! Gallery embedding, exact Euclidean top-k search, top-k accuracy, and
//! the gate-mode ablation runner.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::ImageBank;
use crate::error::{Error, Result};
use crate::gating::GateMode;
use crate::network::{EmbeddingNet, EmbeddingVector, NetworkConfig};
use crate::synth::{Dataset, ImageRef};
use crate::training::{train, TrainConfig, TrainOutput};

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub image_id: String,
    pub item_id: String,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    entries: Vec<GalleryEntry>,
    dim: usize,
}

impl Gallery {
    pub fn new(entries: Vec<GalleryEntry>) -> Result<Gallery> {
        let dim = entries.first().ok_or(Error::Empty("gallery"))?.embedding.len();
        let mut ids = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.embedding.len() != dim {
                return Err(Error::LengthMismatch {
                    left: dim,
                    right: e.embedding.len(),
                });
            }
            if !ids.insert(e.image_id.as_str()) {
                return Err(Error::Dataset(format!("duplicate gallery image id {}", e.image_id)));
            }
        }
        Ok(Gallery { entries, dim })
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn embedding_dim(&self) -> usize {
        self.dim
    }

    pub fn contains_item(&self, item: &str) -> bool {
        self.entries.iter().any(|e| e.item_id == item)
    }
}

/// Eval-mode embeddings of `refs`, in order.
pub fn build_gallery(net: &EmbeddingNet, ds: &Dataset, refs: &[ImageRef]) -> Result<Gallery> {
    if refs.is_empty() {
        return Err(Error::Empty("gallery split"));
    }
    let bank = ImageBank::load(ds, refs, net.config())?;
    let embeddings = bank.embed_all(net)?;
    Gallery::new(
        bank.refs
            .iter()
            .zip(embeddings)
            .map(|(r, embedding)| GalleryEntry {
                image_id: r.id.clone(),
                item_id: r.item.clone(),
                embedding,
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranked {
    pub image_id: String,
    pub item_id: String,
    /// Euclidean distance to the query.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub query_item: String,
    pub ranked: Vec<Ranked>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// Exact k nearest gallery entries by Euclidean distance, ties broken by
/// the lexicographically smaller image id. `exclude` drops one image id
/// from consideration.
pub fn topk_search(gallery: &Gallery, query: &[f32], k: usize, exclude: Option<&str>) -> Result<Vec<Ranked>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if gallery.is_empty() {
        return Err(Error::Empty("gallery"));
    }
    if query.len() != gallery.dim {
        return Err(Error::LengthMismatch {
            left: gallery.dim,
            right: query.len(),
        });
    }
    let mut scored: Vec<(f64, &GalleryEntry)> = gallery
        .entries
        .iter()
        .filter(|e| Some(e.image_id.as_str()) != exclude)
        .map(|e| (sq_dist(query, e.embedding.as_slice()), e))
        .collect();
    let order = |a: &(f64, &GalleryEntry), b: &(f64, &GalleryEntry)| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.1.image_id.cmp(&b.1.image_id))
    };
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k, order);
        scored.truncate(k);
    }
    scored.sort_by(order);
    Ok(scored
        .into_iter()
        .map(|(d, e)| Ranked {
            image_id: e.image_id.clone(),
            item_id: e.item_id.clone(),
            distance: d.sqrt(),
        })
        .collect())
}

/// Fraction of queries whose first `k` ranked entries include the query's
/// item. Every query item must be present in the gallery.
pub fn topk_accuracy(results: &[RetrievalResult], gallery: &Gallery, k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Empty("query set"));
    }
    let items: HashSet<&str> = gallery.entries.iter().map(|e| e.item_id.as_str()).collect();
    let mut hits = 0usize;
    for r in results {
        if !items.contains(r.query_item.as_str()) {
            return Err(Error::Protocol {
                query_id: r.query_id.clone(),
            });
        }
        if r.ranked.iter().take(k).any(|e| e.item_id == r.query_item) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Consumer queries against shop gallery images.
    #[default]
    C2s,
    /// Shop queries against the other shop images of held-out items.
    Inshop,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c2s" => Ok(Task::C2s),
            "inshop" => Ok(Task::Inshop),
            other => Err(Error::Config(format!("unknown task {other:?} (expected c2s or inshop)"))),
        }
    }
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::C2s => "c2s",
            Task::Inshop => "inshop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KAccuracy {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: Task,
    pub queries: usize,
    pub gallery: usize,
    pub accuracy: Vec<KAccuracy>,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.accuracy.iter().find(|a| a.k == k).map(|a| a.accuracy)
    }
}

/// Deduplicated, ascending k values; all must be at least 1.
pub fn normalize_ks(ks: &[usize]) -> Result<Vec<usize>> {
    let mut out = ks.to_vec();
    out.sort_unstable();
    out.dedup();
    if out.is_empty() || out[0] == 0 {
        return Err(Error::Config("k values must be at least 1".into()));
    }
    Ok(out)
}

/// Search every query of the test split and report accuracy at each k.
pub fn retrieve(net: &EmbeddingNet, ds: &Dataset, task: Task, k: usize) -> Result<(Gallery, Vec<RetrievalResult>)> {
    let gallery_refs = ds.manifest.gallery();
    let query_refs = match task {
        Task::C2s => ds.manifest.queries(),
        Task::Inshop => gallery_refs.clone(),
    };
    if query_refs.is_empty() {
        return Err(Error::Empty("query split"));
    }
    let gallery = build_gallery(net, ds, &gallery_refs)?;
    let queries: Vec<(String, String, EmbeddingVector)> = match task {
        Task::Inshop => gallery
            .entries
            .iter()
            .map(|e| (e.image_id.clone(), e.item_id.clone(), e.embedding.clone()))
            .collect(),
        Task::C2s => {
            let bank = ImageBank::load(ds, &query_refs, net.config())?;
            let emb = bank.embed_all(net)?;
            bank.refs.iter().zip(emb).map(|(r, e)| (r.id.clone(), r.item.clone(), e)).collect()
        }
    };
    let results = queries
        .par_iter()
        .map(|(id, item, e)| {
            let exclude = (task == Task::Inshop).then_some(id.as_str());
            Ok(RetrievalResult {
                query_id: id.clone(),
                query_item: item.clone(),
                ranked: topk_search(&gallery, e.as_slice(), k, exclude)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((gallery, results))
}

pub fn evaluate(net: &EmbeddingNet, ds: &Dataset, task: Task, ks: &[usize]) -> Result<EvalReport> {
    let ks = normalize_ks(ks)?;
    let (gallery, results) = retrieve(net, ds, task, *ks.last().expect("non-empty"))?;
    let accuracy = ks
        .iter()
        .map(|&k| {
            Ok(KAccuracy {
                k,
                accuracy: topk_accuracy(&results, &gallery, k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        task,
        queries: results.len(),
        gallery: gallery.len(),
        accuracy,
    })
}

/// SHA-256 of the compact JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: GateMode,
    pub seed: u64,
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationMean {
    pub mode: GateMode,
    pub k: usize,
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub stddev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
    pub means: Vec<AblationMean>,
}

impl AblationReport {
    pub fn mean(&self, mode: GateMode, k: usize) -> Option<f64> {
        self.means.iter().find(|m| m.mode == mode && m.k == k).map(|m| m.mean)
    }

    /// Aligned text: one line per (mode, seed) with accuracy per k, then
    /// mean and stddev lines per mode.
    pub fn to_text(&self) -> String {
        let mut ks: Vec<usize> = self.rows.iter().map(|r| r.k).collect();
        ks.sort_unstable();
        ks.dedup();
        let mut out = String::new();
        let _ = write!(out, "{:<8} {:<8}", "mode", "seed");
        for k in &ks {
            let _ = write!(out, " {:>8}", format!("top-{k}"));
        }
        out.push('\n');
        let mut cells: Vec<(GateMode, u64)> = Vec::new();
        for r in &self.rows {
            if !cells.contains(&(r.mode, r.seed)) {
                cells.push((r.mode, r.seed));
            }
        }
        let mut line = |label: &str, seed: &str, value: &dyn Fn(usize) -> Option<f64>| {
            let _ = write!(out, "{label:<8} {seed:<8}");
            for &k in &ks {
                match value(k) {
                    Some(v) => {
                        let _ = write!(out, " {v:>8.4}");
                    }
                    None => {
                        let _ = write!(out, " {:>8}", "-");
                    }
                }
            }
            out.push('\n');
        };
        for &(mode, seed) in &cells {
            line(mode.as_str(), &seed.to_string(), &|k| {
                self.rows
                    .iter()
                    .find(|r| r.mode == mode && r.seed == seed && r.k == k)
                    .map(|r| r.accuracy)
            });
        }
        let mut modes: Vec<GateMode> = Vec::new();
        for m in &self.means {
            if !modes.contains(&m.mode) {
                modes.push(m.mode);
            }
        }
        for mode in modes {
            let find = |k: usize| self.means.iter().find(|m| m.mode == mode && m.k == k);
            line(mode.as_str(), "mean", &|k| find(k).map(|m| m.mean));
            line(mode.as_str(), "stddev", &|k| find(k).map(|m| m.stddev));
        }
        out
    }
}

/// Inputs shared by every ablation cell; each cell overrides the gate mode
/// and the training seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSpec {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub modes: Vec<GateMode>,
    pub seeds: Vec<u64>,
    pub ks: Vec<usize>,
    pub task: Task,
}

/// Error from one (mode, seed) cell.
#[derive(Debug, thiserror::Error)]
#[error("ablation cell mode={mode} seed={seed}: {source}")]
pub struct CellError {
    pub mode: GateMode,
    pub seed: u64,
    #[source]
    pub source: Error,
}

pub fn run_cell(ds: &Dataset, spec: &AblationSpec, mode: GateMode, seed: u64) -> Result<EvalReport> {
    let network = NetworkConfig {
        gate_mode: mode,
        ..spec.network.clone()
    };
    let train_cfg = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    let outcome = train(ds, &network, &train_cfg, TrainOutput::default())?;
    evaluate(&outcome.net, ds, spec.task, &spec.ks)
}

/// Train and evaluate every (mode, seed) cell, in mode-major order.
pub fn run_ablation(ds: &Dataset, spec: &AblationSpec) -> std::result::Result<AblationReport, CellError> {
    let cell_err = |mode, seed| move |source| CellError { mode, seed, source };
    let ks = normalize_ks(&spec.ks).map_err(cell_err(GateMode::None, 0))?;
    if spec.modes.is_empty() || spec.seeds.is_empty() {
        return Err(CellError {
            mode: GateMode::None,
            seed: 0,
            source: Error::Config("ablation needs at least one mode and one seed".into()),
        });
    }
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for &mode in &spec.modes {
        let mut per_k: Vec<Vec<f64>> = vec![Vec::new(); ks.len()];
        for &seed in &spec.seeds {
            let report = run_cell(ds, spec, mode, seed).map_err(cell_err(mode, seed))?;
            for (i, a) in report.accuracy.iter().enumerate() {
                rows.push(AblationRow {
                    mode,
                    seed,
                    k: a.k,
                    accuracy: a.accuracy,
                });
                per_k[i].push(a.accuracy);
            }
        }
        for (i, &k) in ks.iter().enumerate() {
            let (mean, stddev) = mean_std(&per_k[i]);
            means.push(AblationMean { mode, k, mean, stddev });
        }
    }
    Ok(AblationReport {
        config_hash: config_hash(spec),
        rows,
        means,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
