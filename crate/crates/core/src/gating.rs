//! Attention gating: the stochastic Impdrop connection and the deterministic
//! Product connection.
//!
//! An attention map `p` of shape `(N, 1, H, W)` gates feature maps `x` of
//! shape `(N, C, H, W)`; `p[n, 0, i, j]` applies to every channel at `(i, j)`.
//!
//! * Product, both phases: `y(c) = p * x(c)`.
//! * Impdrop, training: draw `b(c) ~ Bernoulli(p)` independently for every
//!   `(n, c, i, j)` and emit `y(c) = b(c) * x(c)`. No `1/p` rescaling.
//!   Backward passes `dx = b * dy` and, for the attention map, the Product
//!   gradient `dp = sum_c x(c) * dy(c)` as a surrogate, since the sampled
//!   forward has no exact derivative with respect to `p`.
//! * Impdrop, evaluation: identical to Product.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamKey;
use crate::tensor::{Shape, Tensor};

/// Incoming attention values may exceed `[0, 1]` by this much before the
/// gate rejects them; anything inside is clamped.
pub const ATTENTION_SLACK: f32 = 1e-6;

/// How attention is combined with the feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    Impdrop,
    Product,
    /// No gating: the attention branch sees the raw feature maps.
    None,
}

impl GateMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GateMode::Impdrop => "impdrop",
            GateMode::Product => "product",
            GateMode::None => "none",
        }
    }
}

impl std::str::FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "impdrop" => Ok(GateMode::Impdrop),
            "product" => Ok(GateMode::Product),
            "none" => Ok(GateMode::None),
            other => Err(Error::Config(format!("unknown gate mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for GateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Eval,
}

/// Per-location importance probabilities, shape `(N, 1, H, W)`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap(Tensor);

impl AttentionMap {
    /// Validates the range, clamping values within [`ATTENTION_SLACK`] of it.
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().c != 1 {
            return Err(Error::ShapeMismatch {
                expected: values.shape().with_c(1),
                got: values.shape(),
            });
        }
        if let Some(&bad) = values
            .data()
            .iter()
            .find(|&&v| !(-ATTENTION_SLACK..=1.0 + ATTENTION_SLACK).contains(&v))
        {
            return Err(Error::AttentionOutOfRange { value: bad });
        }
        Ok(AttentionMap(values.map(|v| v.clamp(0.0, 1.0))))
    }

    pub fn uniform(shape: Shape, p: f32) -> Result<Self> {
        Self::new(Tensor::new(shape.with_c(1), p)?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    fn check_gates(&self, x: Shape) -> Result<()> {
        let s = self.shape();
        if s.n != x.n || s.h != x.h || s.w != x.w {
            return Err(Error::ShapeMismatch {
                expected: x.with_c(1),
                got: s,
            });
        }
        Ok(())
    }
}

/// A sampled Bernoulli realization of an attention map, one bit per
/// `(n, c, i, j)`. Entries are exactly `0.0` or `1.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMask {
    pub bits: Tensor,
    /// Raw key of the stream the bits were drawn from.
    pub seed_record: u64,
}

/// Draw a gate mask with `channels` channels from the attention map.
///
/// Draws one uniform per entry in row-major `(n, c, i, j)` order from the
/// stream `key` and keeps the entry iff `u < p`, so `p = 0` never keeps
/// and `p = 1` always keeps.
pub fn impdrop_sample_mask(p: &AttentionMap, channels: usize, key: StreamKey) -> Result<GateMask> {
    if channels < 1 {
        return Err(Error::Config("gate mask needs at least one channel".into()));
    }
    let ps = p.shape();
    let shape = ps.with_c(channels);
    let pd = p.tensor().data();
    let plane = ps.plane();
    let mut rng = key.rng();
    let mut bits = Vec::with_capacity(shape.numel());
    for n in 0..ps.n {
        let probs = &pd[n * plane..(n + 1) * plane];
        for _ in 0..channels {
            bits.extend(probs.iter().map(|&pij| {
                let u: f32 = rng.random();
                if u < pij {
                    1.0
                } else {
                    0.0
                }
            }));
        }
    }
    Ok(GateMask {
        bits: Tensor::from_parts(shape, bits),
        seed_record: key.raw(),
    })
}

/// Training forward of Impdrop: `y = x * b`.
pub fn impdrop_forward_train(x: &Tensor, mask: &GateMask) -> Result<Tensor> {
    x.mul(&mask.bits)
}

/// Input gradient of the Impdrop training forward: `dx = b * dy`.
pub fn impdrop_backward_x(mask: &GateMask, dy: &Tensor) -> Result<Tensor> {
    mask.bits.mul(dy)
}

/// Surrogate attention gradient of Impdrop: `dp = sum_c x(c) * dy(c)`.
pub fn impdrop_backward_p(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    channel_dot(x, dy)
}

/// Deterministic gate `y(c) = p * x(c)`: the Impdrop evaluation forward and
/// the Product forward in both phases.
pub fn gate_forward_eval(x: &Tensor, p: &AttentionMap) -> Result<Tensor> {
    p.check_gates(x.shape())?;
    let xs = x.shape();
    let plane = xs.plane();
    let pd = p.tensor().data();
    let mut y = Vec::with_capacity(x.len());
    for (chunk_idx, chunk) in x.data().chunks_exact(plane).enumerate() {
        let n = chunk_idx / xs.c;
        let probs = &pd[n * plane..(n + 1) * plane];
        y.extend(chunk.iter().zip(probs).map(|(&xv, &pv)| xv * pv));
    }
    let y = Tensor::from_parts(xs, y);
    y.ensure_finite("gate forward")?;
    Ok(y)
}

/// Exact gradients of [`gate_forward_eval`].
pub fn product_backward(x: &Tensor, p: &AttentionMap, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    dy.ensure_shape(x.shape())?;
    let dx = gate_forward_eval(dy, p)?;
    let dp = channel_dot(x, dy)?;
    Ok((dx, dp))
}

/// `out[n, 0, i, j] = sum_c a[n, c, i, j] * b[n, c, i, j]`, accumulated in f64
/// in channel order.
fn channel_dot(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    b.ensure_shape(a.shape())?;
    let s = a.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * plane);
    let mut acc = vec![0f64; plane];
    for n in 0..s.n {
        acc.fill(0.0);
        for c in 0..s.c {
            let off = s.offset(n, c, 0, 0);
            let (ac, bc) = (&a.data()[off..off + plane], &b.data()[off..off + plane]);
            for ((sum, &x), &y) in acc.iter_mut().zip(ac).zip(bc) {
                *sum += f64::from(x) * f64::from(y);
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    let t = Tensor::from_parts(s.with_c(1), out);
    t.ensure_finite("attention gradient")?;
    Ok(t)
}

/// Saved state of one gate application.
#[derive(Debug, Clone)]
pub enum GateCache {
    Identity,
    Deterministic { x: Tensor, p: AttentionMap },
    Sampled { x: Tensor, mask: GateMask },
}

/// Apply `mode` in `phase`. `key` is only consumed by Impdrop in training.
pub fn gate_forward(
    mode: GateMode,
    phase: Phase,
    x: &Tensor,
    p: &AttentionMap,
    key: StreamKey,
) -> Result<(Tensor, GateCache)> {
    match (mode, phase) {
        (GateMode::None, _) => Ok((x.clone(), GateCache::Identity)),
        (GateMode::Impdrop, Phase::Train) => {
            p.check_gates(x.shape())?;
            let mask = impdrop_sample_mask(p, x.shape().c, key)?;
            let y = impdrop_forward_train(x, &mask)?;
            Ok((y, GateCache::Sampled { x: x.clone(), mask }))
        }
        (GateMode::Product, _) | (GateMode::Impdrop, Phase::Eval) => {
            let y = gate_forward_eval(x, p)?;
            Ok((
                y,
                GateCache::Deterministic {
                    x: x.clone(),
                    p: p.clone(),
                },
            ))
        }
    }
}

/// Returns `(dx, dp)`; `dp` is `None` when the gate is the identity.
pub fn gate_backward(cache: &GateCache, dy: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
    match cache {
        GateCache::Identity => Ok((dy.clone(), None)),
        GateCache::Deterministic { x, p } => {
            let (dx, dp) = product_backward(x, p, dy)?;
            Ok((dx, Some(dp)))
        }
        GateCache::Sampled { x, mask } => {
            let dx = impdrop_backward_x(mask, dy)?;
            let dp = impdrop_backward_p(x, dy)?;
            Ok((dx, Some(dp)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn mask(shape: [usize; 4], bits: &[f32]) -> GateMask {
        GateMask {
            bits: t(shape, bits),
            seed_record: 0,
        }
    }

    #[test]
    fn degenerate_probabilities_give_degenerate_masks() {
        let key = StreamKey::root(1);
        let ones = AttentionMap::uniform(Shape::new(2, 1, 3, 3), 1.0).unwrap();
        let m = impdrop_sample_mask(&ones, 4, key).unwrap();
        assert_eq!(m.bits.shape(), Shape::new(2, 4, 3, 3));
        assert!(m.bits.data().iter().all(|&b| b == 1.0));
        let zeros = AttentionMap::uniform(Shape::new(2, 1, 3, 3), 0.0).unwrap();
        let m = impdrop_sample_mask(&zeros, 4, key).unwrap();
        assert!(m.bits.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn half_probability_count_within_three_sigma() {
        // 10000 draws at one location: Binomial(10000, 0.5), sigma = 50.
        let p = AttentionMap::uniform(Shape::new(1, 1, 1, 1), 0.5).unwrap();
        let m = impdrop_sample_mask(&p, 10_000, StreamKey::root(42)).unwrap();
        let kept = m.bits.sum();
        assert!((4850.0..=5150.0).contains(&kept), "kept {kept}");
    }

    #[test]
    fn mask_is_seed_deterministic() {
        let p = AttentionMap::uniform(Shape::new(1, 1, 4, 4), 0.3).unwrap();
        let a = impdrop_sample_mask(&p, 3, StreamKey::root(9)).unwrap();
        let b = impdrop_sample_mask(&p, 3, StreamKey::root(9)).unwrap();
        let c = impdrop_sample_mask(&p, 3, StreamKey::root(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.bits, c.bits);
    }

    #[test]
    fn mask_rejects_zero_channels() {
        let p = AttentionMap::uniform(Shape::new(1, 1, 1, 1), 0.5).unwrap();
        assert!(impdrop_sample_mask(&p, 0, StreamKey::root(0)).is_err());
    }

    #[test]
    fn attention_range_is_enforced() {
        assert!(matches!(
            AttentionMap::new(t([1, 1, 1, 1], &[1.01])),
            Err(Error::AttentionOutOfRange { .. })
        ));
        assert!(AttentionMap::new(t([1, 1, 1, 1], &[-0.5])).is_err());
        let clamped = AttentionMap::new(t([1, 1, 1, 2], &[-5e-7, 1.0 + 5e-7])).unwrap();
        assert_eq!(clamped.tensor().data(), &[0.0, 1.0]);
        assert!(AttentionMap::new(t([1, 2, 1, 1], &[0.5, 0.5])).is_err());
    }

    #[test]
    fn train_forward_by_hand() {
        let x = t([1, 2, 1, 1], &[3.0, -2.0]);
        let y = impdrop_forward_train(&x, &mask([1, 2, 1, 1], &[1.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[3.0, 0.0]);
        let y = impdrop_forward_train(&x, &mask([1, 2, 1, 1], &[1.0, 1.0])).unwrap();
        assert_eq!(y, x);
        assert!(impdrop_forward_train(&x, &mask([1, 1, 1, 2], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn train_forward_mean_approaches_eval() {
        // E[y] = p * x = 0.5 * 2 = 1 at a single location.
        let x = t([1, 1, 1, 1], &[2.0]);
        let p = AttentionMap::uniform(x.shape(), 0.5).unwrap();
        let root = StreamKey::root(5);
        let mut sum = 0.0;
        for i in 0..10_000u64 {
            let m = impdrop_sample_mask(&p, 1, root.index(i)).unwrap();
            sum += impdrop_forward_train(&x, &m).unwrap().data()[0] as f64;
        }
        let mean = sum / 10_000.0;
        assert!((mean - 1.0).abs() <= 0.05, "mean {mean}");
    }

    #[test]
    fn backward_x_by_hand() {
        let dy = t([1, 2, 1, 1], &[1.0, 1.0]);
        let dx = impdrop_backward_x(&mask([1, 2, 1, 1], &[1.0, 0.0]), &dy).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0]);
        let dx = impdrop_backward_x(&mask([1, 2, 1, 1], &[0.0, 0.0]), &dy).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0]);
        let dx = impdrop_backward_x(&mask([1, 2, 1, 1], &[1.0, 1.0]), &dy).unwrap();
        assert_eq!(dx, dy);
    }

    #[test]
    fn backward_p_by_hand() {
        let x = t([1, 3, 1, 1], &[1.0, 2.0, 3.0]);
        let dy = t([1, 3, 1, 1], &[0.1, 0.1, 0.1]);
        let dp = impdrop_backward_p(&x, &dy).unwrap();
        assert_eq!(dp.shape(), Shape::new(1, 1, 1, 1));
        assert!((dp.data()[0] - 0.6).abs() < 1e-7);
        let dp = impdrop_backward_p(&x, &Tensor::zeros(x.shape()).unwrap()).unwrap();
        assert_eq!(dp.data(), &[0.0]);
    }

    #[test]
    fn eval_forward_by_hand() {
        let x = t([1, 2, 1, 1], &[2.0, 4.0]);
        let p = AttentionMap::uniform(x.shape(), 0.5).unwrap();
        assert_eq!(gate_forward_eval(&x, &p).unwrap().data(), &[1.0, 2.0]);
        let p1 = AttentionMap::uniform(x.shape(), 1.0).unwrap();
        assert_eq!(gate_forward_eval(&x, &p1).unwrap(), x);
        let p0 = AttentionMap::uniform(x.shape(), 0.0).unwrap();
        assert_eq!(gate_forward_eval(&x, &p0).unwrap().data(), &[0.0, 0.0]);
        let wrong = AttentionMap::uniform(Shape::new(1, 1, 2, 1), 0.5).unwrap();
        assert!(gate_forward_eval(&x, &wrong).is_err());
    }

    #[test]
    fn product_backward_by_hand() {
        let x = t([1, 1, 1, 1], &[7.0]);
        let p = AttentionMap::uniform(x.shape(), 0.5).unwrap();
        let (dx, _) = product_backward(&x, &p, &t([1, 1, 1, 1], &[2.0])).unwrap();
        assert_eq!(dx.data(), &[1.0]);
        let x = t([1, 2, 1, 1], &[1.0, 2.0]);
        let p = AttentionMap::uniform(x.shape(), 0.3).unwrap();
        let (_, dp) = product_backward(&x, &p, &t([1, 2, 1, 1], &[1.0, 1.0])).unwrap();
        assert_eq!(dp.data(), &[3.0]);
    }

    #[test]
    fn gate_none_is_identity_without_attention_gradient() {
        let x = t([1, 2, 1, 1], &[1.0, -1.0]);
        let p = AttentionMap::uniform(x.shape(), 0.2).unwrap();
        let (y, cache) = gate_forward(GateMode::None, Phase::Train, &x, &p, StreamKey::root(0)).unwrap();
        assert_eq!(y, x);
        let (dx, dp) = gate_backward(&cache, &x).unwrap();
        assert_eq!(dx, x);
        assert!(dp.is_none());
    }

    #[test]
    fn impdrop_eval_is_product() {
        let x = t([1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let p = AttentionMap::new(t([1, 1, 1, 2], &[0.25, 0.75])).unwrap();
        let key = StreamKey::root(0);
        let (a, _) = gate_forward(GateMode::Impdrop, Phase::Eval, &x, &p, key).unwrap();
        let (b, _) = gate_forward(GateMode::Product, Phase::Train, &x, &p, key).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.data(), &[0.25, 1.5, 0.75, 3.0]);
    }

    #[test]
    fn gate_mode_parses() {
        assert_eq!("Impdrop".parse::<GateMode>().unwrap(), GateMode::Impdrop);
        assert_eq!(" none".parse::<GateMode>().unwrap(), GateMode::None);
        assert!("dropout".parse::<GateMode>().is_err());
        assert_eq!(serde_json::to_string(&GateMode::Product).unwrap(), "\"product\"");
    }
}
