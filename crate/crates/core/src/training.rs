//! SGD-with-momentum triplet training.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::ImageBank;
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::gating::Phase;
use crate::loss::{
    sample_triplets_cross_domain, sample_triplets_inshop, triplet_loss, triplet_loss_grad, Triplet,
    DEFAULT_MARGIN, DEFAULT_NEGATIVES_PER_PAIR, DEFAULT_PAIRS_PER_CLASS,
};
use crate::network::{EmbeddingNet, NetworkConfig, ParamGrads, ParamId};
use crate::rng::StreamKey;
use crate::synth::{Dataset, DatasetManifest, Split};
use crate::tensor::{Shape, Tensor};

/// A batch whose mean loss exceeds this multiple of the first batch's mean
/// loss aborts training.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletScheme {
    /// Consumer anchor, shop positive, shop negatives.
    #[default]
    CrossDomain,
    /// Anchor, positive and negative all shop images.
    InShop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_triplets: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub margin: f32,
    pub seed: u64,
    /// Fraction of training items used, selected by seeded item-level
    /// subsampling; exactly `ceil(fraction * n_items)` items.
    pub train_fraction: f64,
    pub scheme: TripletScheme,
    pub negatives_per_pair: usize,
    pub pairs_per_class: usize,
    /// Draw fresh negatives every epoch instead of reusing epoch 0's.
    pub resample_negatives: bool,
    /// Also checkpoint every this many epochs; 0 checkpoints only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_triplets: 512,
            learning_rate: 0.05,
            momentum: 0.9,
            margin: DEFAULT_MARGIN,
            seed: 0,
            train_fraction: 1.0,
            scheme: TripletScheme::CrossDomain,
            negatives_per_pair: DEFAULT_NEGATIVES_PER_PAIR,
            pairs_per_class: DEFAULT_PAIRS_PER_CLASS,
            resample_negatives: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!("train_fraction must be in (0, 1], got {}", self.train_fraction));
        }
        if self.batch_triplets == 0 {
            return bad("batch_triplets must be at least 1".into());
        }
        if self.negatives_per_pair == 0 || self.pairs_per_class == 0 {
            return bad("negatives_per_pair and pairs_per_class must be at least 1".into());
        }
        Ok(())
    }

    fn root(&self) -> StreamKey {
        StreamKey::root(self.seed)
    }
}

/// One velocity tensor per parameter tensor. The shared upper layers are a
/// single parameter set, so they have a single velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<(ParamId, Tensor)>,
}

impl OptimizerState {
    pub fn new(net: &EmbeddingNet) -> Self {
        OptimizerState {
            velocity: net
                .params()
                .map(|(id, t)| (id, Tensor::from_parts(t.shape(), vec![0.0; t.len()])))
                .collect(),
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor> {
        self.velocity.iter().find(|(i, _)| *i == id).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.velocity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocity.is_empty()
    }
}

/// `v <- momentum * v - lr * g; w <- w + v`, element-wise. Every gradient is
/// checked for finiteness before any parameter changes.
pub fn sgd_step(
    net: &mut EmbeddingNet,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    lr: f32,
    momentum: f32,
) -> Result<()> {
    for (id, g) in grads.iter() {
        if g.data().iter().any(|v| !v.is_finite()) {
            let layer = net.layers().nth(id.layer).map(|(_, _, l)| l.kind.name()).unwrap_or("?");
            return Err(Error::NonFiniteGradient(format!("{id} ({layer})")));
        }
    }
    for (id, v) in &mut state.velocity {
        let g = grads
            .get(*id)
            .ok_or_else(|| Error::TraceMismatch(format!("no gradient for {id}")))?;
        let w = net
            .param_mut(*id)
            .ok_or_else(|| Error::TraceMismatch(format!("no parameter {id}")))?;
        if g.shape() != w.shape() || v.shape() != w.shape() {
            return Err(Error::ShapeMismatch {
                expected: w.shape(),
                got: g.shape(),
            });
        }
        for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = momentum * *vi - lr * gi;
            *wi += *vi;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f32,
    /// Wall-clock seconds since the Unix epoch; the only nondeterministic field.
    pub timestamp: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: EmbeddingNet,
    pub history: Vec<EpochMetrics>,
    /// Items whose images produced triplets.
    pub items: Vec<String>,
    pub triplets_per_epoch: usize,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|m| m.mean_loss).collect()
    }
}

/// Training items after the `train_fraction` subsample.
pub fn training_items(manifest: &DatasetManifest, config: &TrainConfig) -> Result<DatasetManifest> {
    let train = manifest.split(Split::Train);
    if train.items.is_empty() {
        return Err(Error::Empty("training split"));
    }
    train.subsample(config.train_fraction, config.root().label("subsample"))
}

fn sample_epoch(manifest: &DatasetManifest, config: &TrainConfig, epoch: usize) -> Result<Vec<Triplet>> {
    let draw = if config.resample_negatives { epoch } else { 0 };
    let mut rng = config.root().label("triplets").index(draw as u64).rng();
    match config.scheme {
        TripletScheme::CrossDomain => sample_triplets_cross_domain(manifest, config.negatives_per_pair, &mut rng),
        TripletScheme::InShop => sample_triplets_inshop(manifest, config.pairs_per_class, &mut rng),
    }
}

struct BatchResult {
    /// Per-triplet losses in batch order.
    losses: Vec<f64>,
    grads: ParamGrads,
}

/// Forward every distinct image of the batch once, accumulate triplet
/// gradients per image, and reduce parameter gradients in slot order.
fn run_batch(
    net: &EmbeddingNet,
    bank: &ImageBank,
    batch: &[[usize; 3]],
    margin: f32,
    key: StreamKey,
) -> Result<BatchResult> {
    let mut slots: Vec<usize> = Vec::new();
    let mut slot_of: HashMap<usize, usize> = HashMap::new();
    for t in batch {
        for &img in t {
            slot_of.entry(img).or_insert_with(|| {
                slots.push(img);
                slots.len() - 1
            });
        }
    }

    let forwards = slots
        .par_iter()
        .enumerate()
        .map(|(slot, &img)| net.embed(&bank.images[img], Phase::Train, key.index(slot as u64), bank.oracle[img].as_ref()))
        .collect::<Result<Vec<_>>>()?;

    let dim = net.embedding_dim();
    let mut d_emb = vec![vec![0.0f32; dim]; slots.len()];
    let mut losses = Vec::with_capacity(batch.len());
    let scale = 1.0 / batch.len() as f32;
    for t in batch {
        let [sa, sp, sn] = t.map(|img| slot_of[&img]);
        let (a, p, n) = (forwards[sa].0.data(), forwards[sp].0.data(), forwards[sn].0.data());
        losses.push(triplet_loss(a, p, n, margin)?);
        let (da, dp, dn) = triplet_loss_grad(a, p, n, margin)?;
        for (slot, g) in [(sa, da), (sp, dp), (sn, dn)] {
            for (acc, gi) in d_emb[slot].iter_mut().zip(g) {
                *acc += gi * scale;
            }
        }
    }

    let partial = forwards
        .par_iter()
        .zip(d_emb.par_iter())
        .map(|((_, trace), d)| {
            if d.iter().all(|&v| v == 0.0) {
                return Ok(None);
            }
            let d = Tensor::from_vec(Shape::new(1, dim, 1, 1), d.clone())?;
            net.backward(trace, &d).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = ParamGrads::zeros_like(net);
    for g in partial.iter().flatten() {
        grads.add_assign(g)?;
    }
    Ok(BatchResult { losses, grads })
}

fn unix_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Where training writes its checkpoint and `metrics.jsonl`.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput<'a> {
    pub dir: Option<&'a Path>,
    pub config_hash: Option<String>,
}

/// Train a freshly initialized network on the training split of `ds`.
pub fn train(ds: &Dataset, net_config: &NetworkConfig, config: &TrainConfig, out: TrainOutput<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    let root = config.root();
    let net = EmbeddingNet::build(net_config.clone(), root.label("init"))?;
    train_from(ds, net, config, out)
}

/// Continue training `net` (its config is taken as is).
pub fn train_from(ds: &Dataset, mut net: EmbeddingNet, config: &TrainConfig, out: TrainOutput<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    let root = config.root();
    let items = training_items(&ds.manifest, config)?;
    let refs = items.all_images();
    let bank = ImageBank::load(ds, &refs, net.config())?;
    let mut state = OptimizerState::new(&net);

    let mut metrics_file = match out.dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.jsonl");
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let mut history = Vec::with_capacity(config.epochs);
    let mut initial_batch_loss: Option<f64> = None;
    let mut triplets_per_epoch = 0;
    for epoch in 0..config.epochs {
        let triplets = sample_epoch(&items, config, epoch)?;
        if triplets.is_empty() {
            return Err(Error::Empty("triplet set"));
        }
        triplets_per_epoch = triplets.len();
        let resolved: Vec<[usize; 3]> = triplets
            .iter()
            .map(|t| {
                [&t.anchor, &t.positive, &t.negative].map(|id| bank.index_of(id).expect("sampled ids are in the bank"))
            })
            .collect();
        let mut order: Vec<usize> = (0..resolved.len()).collect();
        order.shuffle(&mut root.label("order").index(epoch as u64).rng());

        let mut losses = vec![0.0f64; resolved.len()];
        for (b, chunk) in order.chunks(config.batch_triplets).enumerate() {
            let batch: Vec<[usize; 3]> = chunk.iter().map(|&i| resolved[i]).collect();
            let key = root.label("mask").index(epoch as u64).index(b as u64);
            let result = run_batch(&net, &bank, &batch, config.margin, key)?;
            let mean = result.losses.iter().sum::<f64>() / batch.len() as f64;
            let reference = *initial_batch_loss.get_or_insert(mean);
            let limit = DIVERGENCE_FACTOR * if reference > 0.0 { reference } else { f64::from(config.margin) };
            if !mean.is_finite() || mean > limit {
                return Err(Error::Diverged { epoch, loss: mean });
            }
            for (&i, l) in chunk.iter().zip(&result.losses) {
                losses[i] = *l;
            }
            sgd_step(&mut net, &result.grads, &mut state, config.learning_rate, config.momentum)?;
        }

        let metrics = EpochMetrics {
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            lr: config.learning_rate,
            timestamp: unix_seconds(),
        };
        if let Some((file, path)) = metrics_file.as_mut() {
            let line = serde_json::to_string(&metrics).expect("metrics serialize");
            writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        history.push(metrics);

        let last = epoch + 1 == config.epochs;
        let periodic = config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0;
        if let (Some(dir), true) = (out.dir, last || periodic) {
            let meta = CheckpointMeta {
                train: Some(config.clone()),
                seed: config.seed,
                epoch: epoch + 1,
                loss_history: history.iter().map(|m| m.mean_loss).collect(),
                config_hash: out.config_hash.clone(),
            };
            save_checkpoint(dir, &net, &meta)?;
        }
    }
    if config.epochs == 0 {
        if let Some(dir) = out.dir {
            let meta = CheckpointMeta {
                train: Some(config.clone()),
                seed: config.seed,
                epoch: 0,
                loss_history: Vec::new(),
                config_hash: out.config_hash.clone(),
            };
            save_checkpoint(dir, &net, &meta)?;
        }
    }

    Ok(TrainOutcome {
        net,
        history,
        items: items.items.iter().map(|i| i.id.clone()).collect(),
        triplets_per_epoch,
    })
}
