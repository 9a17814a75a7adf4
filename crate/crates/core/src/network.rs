//! Two-branch embedding network.
//!
//! ```text
//!              ┌────────────── upper ─ l2norm ──────────────┐ global half
//! image ─ lower ┤                                            ├─ concat
//!   │          └─ gate(·, p) ─ upper ─ l2norm ──────────────┘ attention half
//!   └─ attention head ─ sigmoid ─ p        (or oracle mask)
//! ```
//!
//! `upper` is a single layer stack referenced by both branches; its gradient
//! is the sum of both branch contributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{gate_backward, gate_forward, AttentionMap, GateCache, GateMode, Phase};
use crate::layers::{ForwardCache, Layer, LayerKind, LayerSpec};
use crate::rng::StreamKey;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSource {
    /// Conv head on the image, trained end-to-end through the gate.
    LearnedHead,
    /// Ground-truth foreground mask supplied per image.
    OracleMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Per-image input extents `[C, H, W]`.
    pub input: [usize; 3],
    pub lower: Vec<LayerSpec>,
    /// Runs on the image; must end in a sigmoid and emit one channel at the
    /// spatial extents of the lower-layer output.
    pub attention_head: Vec<LayerSpec>,
    /// Shared by both branches; must emit `embedding_dim / 2` features.
    pub upper: Vec<LayerSpec>,
    pub embedding_dim: usize,
    pub gate_mode: GateMode,
    pub attention_source: AttentionSource,
}

impl Default for NetworkConfig {
    /// 3x32x32 input, 16 feature maps at 8x8, 64-dim embedding.
    fn default() -> Self {
        NetworkConfig {
            input: [3, 32, 32],
            lower: vec![
                LayerSpec::conv(8, 3, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::conv(16, 3, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
            ],
            attention_head: vec![
                LayerSpec::Conv2d {
                    out_channels: 8,
                    kernel: 4,
                    stride: 4,
                    padding: 0,
                },
                LayerSpec::Relu,
                LayerSpec::conv(1, 1, 0),
                LayerSpec::Sigmoid,
            ],
            upper: vec![
                LayerSpec::conv(16, 3, 1),
                LayerSpec::Relu,
                LayerSpec::MaxPool2,
                LayerSpec::Dense { out_features: 32 },
            ],
            embedding_dim: 64,
            gate_mode: GateMode::Impdrop,
            attention_source: AttentionSource::OracleMask,
        }
    }
}

/// Shapes produced by a dry run over a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShapePlan {
    pub image: Shape,
    pub features: Shape,
    pub attention: Shape,
    pub branch_dim: usize,
}

impl NetworkConfig {
    pub fn image_shape(&self) -> Shape {
        Shape::new(1, self.input[0], self.input[1], self.input[2])
    }

    /// Propagate shapes through every stack without allocating parameters.
    pub fn plan(&self) -> Result<ShapePlan> {
        if self.embedding_dim == 0 || self.embedding_dim % 2 != 0 {
            return Err(Error::Config("embedding_dim must be even".into()));
        }
        let image = self.image_shape();
        if image.is_empty() {
            return Err(Error::ZeroExtent(image));
        }
        let features = propagate(&self.lower, image, "lower")?;
        let attention = propagate(&self.attention_head, image, "attention_head")?;
        if self.attention_head.last() != Some(&LayerSpec::Sigmoid) {
            return Err(Error::Config("attention_head must end with a sigmoid".into()));
        }
        if attention != features.with_c(1) {
            return Err(Error::Config(format!(
                "attention head emits {attention}, feature maps are {features}"
            )));
        }
        let branch = propagate(&self.upper, features, "upper")?;
        if branch.sample_len() != self.embedding_dim / 2 {
            return Err(Error::Config(format!(
                "upper layers emit {} features, embedding_dim/2 is {}",
                branch.sample_len(),
                self.embedding_dim / 2
            )));
        }
        Ok(ShapePlan {
            image,
            features,
            attention,
            branch_dim: branch.sample_len(),
        })
    }
}

fn propagate(stack: &[LayerSpec], input: Shape, name: &str) -> Result<Shape> {
    if stack.is_empty() {
        return Err(Error::Config(format!("{name} stack is empty")));
    }
    stack.iter().try_fold(input, |s, spec| {
        let out = spec
            .resolve(s)
            .output_shape(s)
            .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        if out.is_empty() {
            return Err(Error::Config(format!("{name}: layer output {out} is empty")));
        }
        Ok(out)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Lower,
    AttentionHead,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
}

impl ParamRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
        }
    }
}

/// Names one parameter tensor by its global layer index and role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub layer: usize,
    pub role: ParamRole,
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}_{}", self.layer, self.role.as_str())
    }
}

/// A flat embedding: global half followed by attention half, each L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f32>);

impl EmbeddingVector {
    pub fn halves(&self) -> (&[f32], &[f32]) {
        self.0.split_at(self.0.len() / 2)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The assembled network. `upper` exists exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    config: NetworkConfig,
    plan: ShapePlan,
    pub lower: Vec<Layer>,
    pub attention_head: Vec<Layer>,
    pub upper: Vec<Layer>,
    branch_norm: Layer,
}

/// Everything [`EmbeddingNet::backward`] needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub phase: Phase,
    layer_count: usize,
    batch: usize,
    lower: Vec<ForwardCache>,
    head: Option<Vec<ForwardCache>>,
    global: Vec<ForwardCache>,
    attention: Vec<ForwardCache>,
    gate: GateCache,
    /// Attention map used by the gate, when one was needed.
    pub attention_map: Option<AttentionMap>,
}

/// Per-layer parameter gradients, indexed by global layer index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    layers: Vec<(Option<Tensor>, Option<Tensor>)>,
}

impl ParamGrads {
    pub fn zeros_like(net: &EmbeddingNet) -> Self {
        let layers = net
            .layers()
            .map(|(_, _, l)| {
                (
                    l.weights.as_ref().map(|w| Tensor::from_parts(w.shape(), vec![0.0; w.len()])),
                    l.bias.as_ref().map(|b| Tensor::from_parts(b.shape(), vec![0.0; b.len()])),
                )
            })
            .collect();
        ParamGrads { layers }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        let (w, b) = self.layers.get(id.layer)?;
        match id.role {
            ParamRole::Weight => w.as_ref(),
            ParamRole::Bias => b.as_ref(),
        }
    }

    /// Replace the gradient at `id`; the shape must match.
    pub fn set(&mut self, id: ParamId, g: Tensor) -> Result<()> {
        let (w, b) = self
            .layers
            .get_mut(id.layer)
            .ok_or_else(|| Error::TraceMismatch(format!("no layer {}", id.layer)))?;
        let slot = match id.role {
            ParamRole::Weight => w,
            ParamRole::Bias => b,
        };
        match slot {
            Some(t) => {
                g.ensure_shape(t.shape())?;
                *t = g;
                Ok(())
            }
            None => Err(Error::TraceMismatch(format!("layer {} has no {}", id.layer, id.role.as_str()))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.layers.iter().enumerate().flat_map(|(layer, (w, b))| {
            w.iter()
                .map(move |t| (ParamId { layer, role: ParamRole::Weight }, t))
                .chain(b.iter().map(move |t| (ParamId { layer, role: ParamRole::Bias }, t)))
        })
    }

    pub fn add_assign(&mut self, other: &ParamGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::TraceMismatch("gradient sets differ in layer count".into()));
        }
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (dst, src) in [(w, ow), (b, ob)] {
                match (dst, src) {
                    (Some(d), Some(s)) => d.add_assign(s)?,
                    (None, None) => {}
                    _ => return Err(Error::TraceMismatch("gradient sets differ in structure".into())),
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f32) {
        for (w, b) in &mut self.layers {
            for t in [w, b].into_iter().flatten() {
                t.scale(s);
            }
        }
    }

    fn accumulate(&mut self, layer: usize, dw: Option<Tensor>, db: Option<Tensor>) -> Result<()> {
        let (w, b) = &mut self.layers[layer];
        if let (Some(acc), Some(g)) = (w.as_mut(), dw.as_ref()) {
            acc.add_assign(g)?;
        }
        if let (Some(acc), Some(g)) = (b.as_mut(), db.as_ref()) {
            acc.add_assign(g)?;
        }
        Ok(())
    }
}

impl EmbeddingNet {
    /// Build with Glorot-uniform weights drawn from `key`.
    pub fn build(config: NetworkConfig, key: StreamKey) -> Result<Self> {
        let plan = config.plan()?;
        let mut rng = key.rng();
        let mut build_stack = |stack: &[LayerSpec], input: Shape| -> Result<Vec<Layer>> {
            let mut shape = input;
            stack
                .iter()
                .map(|spec| {
                    let layer = Layer::init(spec, shape, &mut rng)?;
                    shape = layer.kind.output_shape(shape)?;
                    Ok(layer)
                })
                .collect()
        };
        let lower = build_stack(&config.lower, plan.image)?;
        let attention_head = build_stack(&config.attention_head, plan.image)?;
        let upper = build_stack(&config.upper, plan.features)?;
        Ok(EmbeddingNet {
            config,
            plan,
            lower,
            attention_head,
            upper,
            branch_norm: Layer::with_params(LayerKind::L2Norm, None, None)?,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn plan(&self) -> ShapePlan {
        self.plan
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn gate_mode(&self) -> GateMode {
        self.config.gate_mode
    }

    pub fn layer_count(&self) -> usize {
        self.lower.len() + self.attention_head.len() + self.upper.len()
    }

    /// All layers with their global index and block, in index order.
    pub fn layers(&self) -> impl Iterator<Item = (usize, Block, &Layer)> {
        self.lower
            .iter()
            .map(|l| (Block::Lower, l))
            .chain(self.attention_head.iter().map(|l| (Block::AttentionHead, l)))
            .chain(self.upper.iter().map(|l| (Block::Upper, l)))
            .enumerate()
            .map(|(i, (b, l))| (i, b, l))
    }

    pub fn layer_mut(&mut self, index: usize) -> Option<&mut Layer> {
        let (nl, nh) = (self.lower.len(), self.attention_head.len());
        if index < nl {
            self.lower.get_mut(index)
        } else if index < nl + nh {
            self.attention_head.get_mut(index - nl)
        } else {
            self.upper.get_mut(index - nl - nh)
        }
    }

    pub fn block_of(&self, index: usize) -> Block {
        let (nl, nh) = (self.lower.len(), self.attention_head.len());
        if index < nl {
            Block::Lower
        } else if index < nl + nh {
            Block::AttentionHead
        } else {
            Block::Upper
        }
    }

    /// Every parameter tensor in `(layer, role)` order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.layers().flat_map(|(layer, _, l)| {
            l.weights
                .iter()
                .map(move |t| (ParamId { layer, role: ParamRole::Weight }, t))
                .chain(l.bias.iter().map(move |t| (ParamId { layer, role: ParamRole::Bias }, t)))
        })
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        let (_, _, l) = self.layers().nth(id.layer)?;
        match id.role {
            ParamRole::Weight => l.weights.as_ref(),
            ParamRole::Bias => l.bias.as_ref(),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        let l = self.layer_mut(id.layer)?;
        match id.role {
            ParamRole::Weight => l.weights.as_mut(),
            ParamRole::Bias => l.bias.as_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|(_, t)| t.len()).sum()
    }

    /// Run the attention head on `image` and return its map.
    pub fn attention_map(&self, image: &Tensor) -> Result<AttentionMap> {
        let (out, _) = run_stack(&self.attention_head, image)?;
        AttentionMap::new(out)
    }

    /// Embed a batch of images `(N, C, H, W)`; returns `(N, D, 1, 1)`.
    ///
    /// `oracle` must be given iff the network is configured for oracle
    /// attention. `key` seeds the Impdrop mask in training.
    pub fn embed(
        &self,
        image: &Tensor,
        phase: Phase,
        key: StreamKey,
        oracle: Option<&AttentionMap>,
    ) -> Result<(Tensor, ForwardTrace)> {
        let plan = self.plan;
        let n = image.shape().n;
        image.ensure_shape(plan.image.with_n(n))?;
        match (self.config.attention_source, oracle) {
            (AttentionSource::OracleMask, None) => {
                return Err(Error::Config("oracle attention configured but no mask given".into()))
            }
            (AttentionSource::LearnedHead, Some(_)) => {
                return Err(Error::Config("oracle mask given to a learned-head network".into()))
            }
            _ => {}
        }

        let (features, lower) = run_stack(&self.lower, image)?;

        let (global_out, global) = run_stack(&self.upper, &features)?;
        let (global_emb, global_norm) = self.branch_norm.forward(&global_out)?;
        let mut global = global;
        global.push(global_norm);

        let (gated, gate, head, attention_map) = if self.config.gate_mode == GateMode::None {
            (features.clone(), GateCache::Identity, None, None)
        } else {
            let (map, head) = match oracle {
                Some(m) => (m.clone(), None),
                None => {
                    let (out, caches) = run_stack(&self.attention_head, image)?;
                    (AttentionMap::new(out)?, Some(caches))
                }
            };
            let (gated, gate) = gate_forward(self.config.gate_mode, phase, &features, &map, key)?;
            (gated, gate, head, Some(map))
        };

        let (att_out, attention) = run_stack(&self.upper, &gated)?;
        let (att_emb, att_norm) = self.branch_norm.forward(&att_out)?;
        let mut attention = attention;
        attention.push(att_norm);

        let half = plan.branch_dim;
        let mut emb = Vec::with_capacity(n * 2 * half);
        for s in 0..n {
            emb.extend_from_slice(global_emb.sample(s));
            emb.extend_from_slice(att_emb.sample(s));
        }
        let emb = Tensor::from_parts(Shape::new(n, 2 * half, 1, 1), emb);
        Ok((
            emb,
            ForwardTrace {
                phase,
                layer_count: self.layer_count(),
                batch: n,
                lower,
                head,
                global,
                attention,
                gate,
                attention_map,
            },
        ))
    }

    /// Embed one image and return its embedding vector.
    pub fn embed_one(
        &self,
        image: &Tensor,
        phase: Phase,
        key: StreamKey,
        oracle: Option<&AttentionMap>,
    ) -> Result<EmbeddingVector> {
        let (emb, _) = self.embed(image, phase, key, oracle)?;
        Ok(EmbeddingVector(emb.into_data()))
    }

    /// Parameter gradients for `d_embedding` (shape `(N, D, 1, 1)`).
    pub fn backward(&self, trace: &ForwardTrace, d_embedding: &Tensor) -> Result<ParamGrads> {
        if trace.layer_count != self.layer_count() {
            return Err(Error::TraceMismatch(format!(
                "trace has {} layers, network has {}",
                trace.layer_count,
                self.layer_count()
            )));
        }
        let half = self.plan.branch_dim;
        let n = trace.batch;
        d_embedding.ensure_shape(Shape::new(n, 2 * half, 1, 1))?;
        let mut dg = Vec::with_capacity(n * half);
        let mut da = Vec::with_capacity(n * half);
        for s in 0..n {
            let (g, a) = d_embedding.sample(s).split_at(half);
            dg.extend_from_slice(g);
            da.extend_from_slice(a);
        }
        let branch = Shape::new(n, half, 1, 1);
        let dg = Tensor::from_parts(branch, dg);
        let da = Tensor::from_parts(branch, da);

        let mut grads = ParamGrads::zeros_like(self);
        let upper_base = self.lower.len() + self.attention_head.len();

        let d_feat_global = self.branch_backward(&trace.global, &dg, upper_base, &mut grads)?;
        let d_gated = self.branch_backward(&trace.attention, &da, upper_base, &mut grads)?;
        let (d_feat_att, dp) = gate_backward(&trace.gate, &d_gated)?;
        let d_features = d_feat_global.add(&d_feat_att)?;

        backward_stack(&self.lower, &trace.lower, d_features, 0, &mut grads)?;

        if let (Some(dp), Some(head)) = (dp, trace.head.as_ref()) {
            backward_stack(&self.attention_head, head, dp, self.lower.len(), &mut grads)?;
        }
        Ok(grads)
    }

    /// ReLU signs and maxpool winners across every piecewise layer the
    /// trace went through. Two traces with equal patterns lie on the same
    /// linear piece, which is what finite-difference checks need.
    pub fn switch_pattern(&self, trace: &ForwardTrace) -> Vec<u32> {
        let mut out = Vec::new();
        stack_pattern(&self.lower, &trace.lower, &mut out);
        if let Some(head) = &trace.head {
            stack_pattern(&self.attention_head, head, &mut out);
        }
        stack_pattern(&self.upper, &trace.global, &mut out);
        stack_pattern(&self.upper, &trace.attention, &mut out);
        out
    }

    /// Backward through `upper` + branch normalization; returns the gradient
    /// with respect to the branch input.
    fn branch_backward(
        &self,
        caches: &[ForwardCache],
        d_out: &Tensor,
        upper_base: usize,
        grads: &mut ParamGrads,
    ) -> Result<Tensor> {
        let (norm_cache, upper_caches) = caches
            .split_last()
            .ok_or_else(|| Error::TraceMismatch("empty branch trace".into()))?;
        let d = self.branch_norm.backward(norm_cache, d_out)?.dx;
        backward_stack(&self.upper, upper_caches, d, upper_base, grads)
    }
}

fn run_stack(layers: &[Layer], x: &Tensor) -> Result<(Tensor, Vec<ForwardCache>)> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for layer in layers {
        let (y, cache) = layer.forward(&cur)?;
        caches.push(cache);
        cur = y;
    }
    Ok((cur, caches))
}

fn stack_pattern(layers: &[Layer], caches: &[ForwardCache], out: &mut Vec<u32>) {
    for (layer, cache) in layers.iter().zip(caches) {
        layer.switch_pattern(cache, out);
    }
}

fn backward_stack(
    layers: &[Layer],
    caches: &[ForwardCache],
    dy: Tensor,
    base: usize,
    grads: &mut ParamGrads,
) -> Result<Tensor> {
    if layers.len() != caches.len() {
        return Err(Error::TraceMismatch(format!(
            "{} caches for {} layers",
            caches.len(),
            layers.len()
        )));
    }
    let mut d = dy;
    for (i, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let g = layer.backward(cache, &d)?;
        grads.accumulate(base + i, g.dweights, g.dbias)?;
        d = g.dx;
    }
    Ok(d)
}
