pub mod bank;
pub mod checkpoint;
pub mod desk;
pub mod error;
pub mod gating;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod retrieval;
pub mod network;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use gating::{AttentionMap, GateMask, GateMode, Phase};
pub use network::{AttentionSource, EmbeddingNet, EmbeddingVector, NetworkConfig, ParamGrads, ParamId};
pub use rng::StreamKey;
pub use tensor::{Shape, Tensor};
