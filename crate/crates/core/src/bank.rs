//! Decoded images, their oracle attention maps, and batched embedding.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gating::{AttentionMap, Phase};
use crate::network::{AttentionSource, EmbeddingNet, EmbeddingVector, NetworkConfig};
use crate::rng::StreamKey;
use crate::synth::{oracle_attention, Dataset, ImageRef};
use crate::tensor::{Shape, Tensor};

/// Images addressed by dense index, in the order they were requested.
#[derive(Debug, Clone)]
pub struct ImageBank {
    pub refs: Vec<ImageRef>,
    pub images: Vec<Tensor>,
    /// Present iff the network reads oracle attention.
    pub oracle: Vec<Option<AttentionMap>>,
    index: HashMap<String, usize>,
}

impl ImageBank {
    /// Decode `refs` (duplicates collapse to the first occurrence) and, for
    /// oracle-attention networks, downsample each mask to the feature grid.
    pub fn load(ds: &Dataset, refs: &[ImageRef], config: &NetworkConfig) -> Result<ImageBank> {
        let plan = config.plan()?;
        let (h, w) = ds.manifest.extents();
        if plan.image.h != h || plan.image.w != w || plan.image.c != 3 {
            return Err(Error::ShapeMismatch {
                expected: plan.image,
                got: Shape::new(plan.image.n, 3, h, w),
            });
        }
        let mut unique = Vec::with_capacity(refs.len());
        let mut index = HashMap::with_capacity(refs.len());
        for r in refs {
            if !index.contains_key(&r.id) {
                index.insert(r.id.clone(), unique.len());
                unique.push(r.clone());
            }
        }
        let want_oracle = config.attention_source == AttentionSource::OracleMask;
        let target = (plan.attention.h, plan.attention.w);
        let loaded: Vec<(Tensor, Option<AttentionMap>)> = unique
            .par_iter()
            .map(|r| {
                let img = ds.image(r)?;
                let oracle = if want_oracle {
                    Some(oracle_attention(&ds.mask(r)?, target)?)
                } else {
                    None
                };
                Ok((img, oracle))
            })
            .collect::<Result<_>>()?;
        let (images, oracle) = loaded.into_iter().unzip();
        Ok(ImageBank {
            refs: unique,
            images,
            oracle,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Eval-mode embeddings for every image, in bank order.
    pub fn embed_all(&self, net: &EmbeddingNet) -> Result<Vec<EmbeddingVector>> {
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                net.embed_one(
                    &self.images[i],
                    Phase::Eval,
                    StreamKey::root(0),
                    self.oracle[i].as_ref(),
                )
            })
            .collect()
    }
}
