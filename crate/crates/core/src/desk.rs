//! The desk-scale benchmark: a fixed synthetic dataset and the two gate-mode
//! comparisons run on it.

use crate::gating::GateMode;
use crate::loss::DIFFICULT_MARGIN;
use crate::network::NetworkConfig;
use crate::retrieval::{AblationSpec, Task};
use crate::synth::GenerateOptions;
use crate::training::TrainConfig;

pub const DATA_SEED: u64 = 2024;
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const KS: [usize; 4] = [1, 5, 10, 20];

/// 64 items, 4 consumer views each, 32x32 images.
pub fn dataset() -> GenerateOptions {
    GenerateOptions::new(64, 4, (32, 32), DATA_SEED)
}

/// Impdrop with oracle attention against the ungated network, full
/// training split.
pub fn attention_ablation() -> AblationSpec {
    AblationSpec {
        network: NetworkConfig::default(),
        train: TrainConfig::default(),
        modes: vec![GateMode::Impdrop, GateMode::None],
        seeds: SEEDS.to_vec(),
        ks: KS.to_vec(),
        task: Task::C2s,
    }
}

/// Impdrop against Product on a 10% item subsample with the enlarged margin.
pub fn reduced_data_ablation() -> AblationSpec {
    AblationSpec {
        network: NetworkConfig::default(),
        train: TrainConfig {
            train_fraction: 0.1,
            margin: DIFFICULT_MARGIN,
            ..TrainConfig::default()
        },
        modes: vec![GateMode::Impdrop, GateMode::Product],
        seeds: SEEDS.to_vec(),
        ks: KS.to_vec(),
        task: Task::C2s,
    }
}
