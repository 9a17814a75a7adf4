//! Checkpoint directories: `manifest.json` plus one tensor blob per
//! parameter, named `<layer_index>_<role>.tns`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Block, EmbeddingNet, NetworkConfig, ParamId};
use crate::rng::StreamKey;
use crate::tensor::{Shape, Tensor};
use crate::training::TrainConfig;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub index: usize,
    pub block: Block,
    pub kind: String,
    pub params: Vec<ParamRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub file: String,
    pub shape: Shape,
}

/// Training context stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointMeta {
    pub train: Option<TrainConfig>,
    pub seed: u64,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub network: NetworkConfig,
    pub train: Option<TrainConfig>,
    pub layers: Vec<LayerRecord>,
    pub seed: u64,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl CheckpointManifest {
    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            train: self.train.clone(),
            seed: self.seed,
            epoch: self.epoch,
            loss_history: self.loss_history.clone(),
            config_hash: self.config_hash.clone(),
        }
    }
}

fn blob_name(id: ParamId) -> String {
    format!("{id}.tns")
}

/// Write every parameter blob, then the manifest through a rename so a
/// reader never sees a manifest without its blobs.
pub fn save_checkpoint(dir: &Path, net: &EmbeddingNet, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layers: Vec<LayerRecord> = net
        .layers()
        .map(|(index, block, l)| LayerRecord {
            index,
            block,
            kind: l.kind.name().to_string(),
            params: Vec::new(),
        })
        .collect();
    for (id, t) in net.params() {
        let file = blob_name(id);
        t.write_blob(&dir.join(&file))?;
        layers[id.layer].params.push(ParamRecord { file, shape: t.shape() });
    }
    let manifest = CheckpointManifest {
        network: net.config().clone(),
        train: meta.train.clone(),
        layers,
        seed: meta.seed,
        epoch: meta.epoch,
        loss_history: meta.loss_history.clone(),
        config_hash: meta.config_hash.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("checkpoint manifest serializes");
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
    let dst = dir.join(MANIFEST);
    fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json { path, source })
}

pub fn load_checkpoint(dir: &Path) -> Result<(EmbeddingNet, CheckpointManifest)> {
    let manifest = read_manifest(dir)?;
    let mut net = EmbeddingNet::build(manifest.network.clone(), StreamKey::root(0))?;
    let malformed = |reason: String| Error::Malformed {
        path: dir.join(MANIFEST),
        reason,
    };
    if manifest.layers.len() != net.layer_count() {
        return Err(malformed(format!(
            "{} layers listed, config builds {}",
            manifest.layers.len(),
            net.layer_count()
        )));
    }
    let ids: Vec<ParamId> = net.params().map(|(id, _)| id).collect();
    let listed: usize = manifest.layers.iter().map(|l| l.params.len()).sum();
    if listed != ids.len() {
        return Err(malformed(format!("{listed} parameter blobs listed, config has {}", ids.len())));
    }
    for id in ids {
        let path = dir.join(blob_name(id));
        let t = Tensor::read_blob(&path)?;
        let slot = net.param_mut(id).expect("id from params()");
        if t.shape() != slot.shape() {
            return Err(Error::Malformed {
                path,
                reason: format!("shape {} does not match {}", t.shape(), slot.shape()),
            });
        }
        *slot = t;
    }
    Ok((net, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::Phase;

    #[test]
    fn round_trip_preserves_parameters_and_embeddings() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = NetworkConfig {
            attention_source: crate::network::AttentionSource::LearnedHead,
            ..NetworkConfig::default()
        };
        let net = EmbeddingNet::build(cfg, StreamKey::root(5)).unwrap();
        let meta = CheckpointMeta {
            seed: 5,
            epoch: 2,
            loss_history: vec![0.3, 0.2],
            ..Default::default()
        };
        save_checkpoint(dir.path(), &net, &meta).unwrap();
        assert!(dir.path().join("0_weight.tns").exists());
        assert!(dir.path().join("13_bias.tns").exists());
        assert!(!dir.path().join("manifest.json.tmp").exists());
        let (back, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m.meta(), meta);
        for ((a, x), (b, y)) in net.params().zip(back.params()) {
            assert_eq!(a, b);
            assert_eq!(x, y);
        }
        let img = Tensor::new(Shape::new(1, 3, 32, 32), 0.3).unwrap();
        let e1 = net.embed_one(&img, Phase::Eval, StreamKey::root(0), None).unwrap();
        let e2 = back.embed_one(&img, Phase::Eval, StreamKey::root(0), None).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn missing_or_wrong_blob_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let net = EmbeddingNet::build(NetworkConfig::default(), StreamKey::root(1)).unwrap();
        save_checkpoint(dir.path(), &net, &CheckpointMeta::default()).unwrap();
        let blob = dir.path().join("3_weight.tns");
        let bytes = fs::read(&blob).unwrap();
        fs::remove_file(&blob).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(err.contains("3_weight.tns"), "{err}");
        Tensor::zeros(Shape::new(1, 1, 1, 2)).unwrap().write_blob(&blob).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
        fs::write(&blob, bytes).unwrap();
        assert!(load_checkpoint(dir.path()).is_ok());
    }
}
