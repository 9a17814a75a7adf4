//! Central finite-difference checks for every layer kind, the gates, and the
//! composed evaluation-mode network.
//!
//! Each check projects the output onto a fixed random direction `r`
//! (`L = sum r * y`, accumulated in f64), back-propagates `dy = r`, and
//! compares every analytic component against `(L(x+h) - L(x-h)) / 2h`.
//! A component passes if it is within the relative OR the absolute
//! tolerance.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gating::{
    gate_forward_eval, impdrop_backward_p, impdrop_backward_x, impdrop_forward_train, impdrop_sample_mask,
    product_backward, AttentionMap, GateMode, Phase,
};
use crate::layers::{Layer, LayerKind};
use crate::network::{AttentionSource, Block, EmbeddingNet, NetworkConfig, ParamId};
use crate::rng::{StreamKey, StreamRng};
use crate::tensor::{dot, Shape, Tensor};

pub const LAYER_STEP: f32 = 1e-3;
pub const LAYER_TOL: Tolerance = Tolerance { rel: 1e-3, abs: 1e-5 };
pub const NETWORK_STEP: f32 = 1e-3;
pub const NETWORK_TOL: Tolerance = Tolerance { rel: 1e-2, abs: 1e-4 };

/// Inputs closer than this to a relu kink or a maxpool tie are redrawn.
const KINK_MARGIN: f32 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Layer,
    Network,
}

impl std::str::FromStr for Scope {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(Scope::Layer),
            "network" => Ok(Scope::Network),
            other => Err(crate::Error::Config(format!("unknown gradcheck scope '{other}'"))),
        }
    }
}

/// Outcome of one named check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckEntry {
    pub name: String,
    pub components: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub tolerance: Tolerance,
    pub passed: bool,
    /// Sampled components dropped because the probe crossed a ReLU or
    /// maxpool switch.
    pub skipped: usize,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GradcheckReport {
    pub entries: Vec<CheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.passed)
    }

    pub fn entry(&self, name: &str) -> Option<&CheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:<4} {:<28} n={:<5} skipped={:<3} max_abs={:.3e} max_rel={:.3e} (rel<={:.0e} or abs<={:.0e})",
                if e.passed { "PASS" } else { "FAIL" },
                e.name,
                e.components,
                e.skipped,
                e.max_abs_err,
                e.max_rel_err,
                e.tolerance.rel,
                e.tolerance.abs,
            );
        }
        out
    }
}

/// Accumulates analytic/numeric pairs for one check.
#[derive(Debug)]
pub struct Comparison {
    name: String,
    tol: Tolerance,
    components: usize,
    max_abs: f64,
    max_rel: f64,
    passed: bool,
}

impl Comparison {
    pub fn new(name: impl Into<String>, tol: Tolerance) -> Self {
        Comparison {
            name: name.into(),
            tol,
            components: 0,
            max_abs: 0.0,
            max_rel: 0.0,
            passed: true,
        }
    }

    pub fn push(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { abs / scale } else { 0.0 };
        self.components += 1;
        self.max_abs = self.max_abs.max(abs);
        self.max_rel = self.max_rel.max(rel);
        if !(abs <= self.tol.abs || rel <= self.tol.rel) {
            self.passed = false;
        }
    }

    pub fn finish(self) -> CheckEntry {
        CheckEntry {
            name: self.name,
            components: self.components,
            max_abs_err: self.max_abs,
            max_rel_err: self.max_rel,
            tolerance: self.tol,
            passed: self.passed && self.components > 0,
            skipped: 0,
        }
    }
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for a scalar function of a buffer.
pub fn central_difference(values: &mut [f32], i: usize, h: f32, mut f: impl FnMut(&[f32]) -> f64) -> f64 {
    let orig = values[i];
    values[i] = orig + h;
    let plus = f(values);
    values[i] = orig - h;
    let minus = f(values);
    values[i] = orig;
    // The perturbation actually applied after f32 rounding.
    let span = f64::from(orig + h) - f64::from(orig - h);
    (plus - minus) / span
}

fn uniform(rng: &mut StreamRng, shape: Shape, lo: f32, hi: f32) -> Tensor {
    Tensor::from_parts(shape, (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect())
}

fn away_from_zero(rng: &mut StreamRng, shape: Shape) -> Tensor {
    let data = (0..shape.numel())
        .map(|_| loop {
            let v: f32 = rng.random_range(-1.0..1.0);
            if v.abs() > KINK_MARGIN {
                break v;
            }
        })
        .collect();
    Tensor::from_parts(shape, data)
}

/// Every 2x2 pooling block has a unique maximum separated by the kink margin.
fn distinct_blocks(rng: &mut StreamRng, shape: Shape) -> Tensor {
    let mut t = uniform(rng, shape, -1.0, 1.0);
    let (h2, w2) = (shape.h / 2, shape.w / 2);
    for n in 0..shape.n {
        for c in 0..shape.c {
            for by in 0..h2 {
                for bx in 0..w2 {
                    let idx: Vec<usize> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| shape.offset(n, c, 2 * by + dy, 2 * bx + dx))
                        .collect();
                    let base: f32 = rng.random_range(-1.0..0.0);
                    let winner = rng.random_range(0..4);
                    for (k, &i) in idx.iter().enumerate() {
                        t.data_mut()[i] = if k == winner {
                            base + 0.5 + rng.random_range(0.0..0.5)
                        } else {
                            base + rng.random_range(0.0..0.5 - KINK_MARGIN)
                        };
                    }
                }
            }
        }
    }
    t
}

fn check_layer(name: &str, layer: &Layer, x: &Tensor, rng: &mut StreamRng) -> Result<Vec<CheckEntry>> {
    let (y, cache) = layer.forward(x)?;
    let r = uniform(rng, y.shape(), -1.0, 1.0);
    let grads = layer.backward(&cache, &r)?;
    let project = |y: Vec<f64>| -> f64 { y.iter().zip(r.data()).map(|(&a, &b)| a * f64::from(b)).sum() };

    let mut out = Vec::new();
    let mut cmp = Comparison::new(format!("{name}/dx"), LAYER_TOL);
    let mut xv = x.data().to_vec();
    for i in 0..xv.len() {
        let num = central_difference(&mut xv, i, LAYER_STEP, |v| {
            let xt = Tensor::from_parts(x.shape(), v.to_vec());
            project(layer.forward_wide(&xt).expect("forward on checked input"))
        });
        cmp.push(f64::from(grads.dx.data()[i]), num);
    }
    out.push(cmp.finish());

    for (role, analytic) in [("dweight", &grads.dweights), ("dbias", &grads.dbias)] {
        let Some(analytic) = analytic else { continue };
        let mut probe = layer.clone();
        let mut cmp = Comparison::new(format!("{name}/{role}"), LAYER_TOL);
        let param = if role == "dweight" {
            probe.weights.clone()
        } else {
            probe.bias.clone()
        }
        .expect("parametric layer");
        let mut pv = param.data().to_vec();
        for i in 0..pv.len() {
            let num = central_difference(&mut pv, i, LAYER_STEP, |v| {
                let t = Tensor::from_parts(param.shape(), v.to_vec());
                if role == "dweight" {
                    probe.weights = Some(t);
                } else {
                    probe.bias = Some(t);
                }
                project(probe.forward_wide(x).expect("forward on checked input"))
            });
            cmp.push(f64::from(analytic.data()[i]), num);
        }
        out.push(cmp.finish());
    }
    Ok(out)
}

fn layer_with_random_params(kind: LayerKind, rng: &mut StreamRng) -> Result<Layer> {
    let w = kind.weight_shape().map(|s| uniform(rng, s, -1.0, 1.0));
    let b = kind.bias_shape().map(|s| uniform(rng, s, -1.0, 1.0));
    Layer::with_params(kind, w, b)
}

/// Isolated checks for every layer kind and both gate connections.
pub fn check_layers(seed: u64) -> Result<GradcheckReport> {
    let mut rng = StreamKey::root(seed).label("gradcheck-layers").rng();
    let mut entries = Vec::new();

    let conv = LayerKind::Conv2d {
        in_channels: 3,
        out_channels: 4,
        kernel: 3,
        stride: 1,
        padding: 1,
    };
    let x = uniform(&mut rng, Shape::new(2, 3, 6, 6), -1.0, 1.0);
    let layer = layer_with_random_params(conv, &mut rng)?;
    entries.extend(check_layer("conv2d", &layer, &x, &mut rng)?);

    let strided = LayerKind::Conv2d {
        in_channels: 2,
        out_channels: 3,
        kernel: 4,
        stride: 4,
        padding: 0,
    };
    let x = uniform(&mut rng, Shape::new(1, 2, 8, 8), -1.0, 1.0);
    let layer = layer_with_random_params(strided, &mut rng)?;
    entries.extend(check_layer("conv2d_strided", &layer, &x, &mut rng)?);

    let x = away_from_zero(&mut rng, Shape::new(2, 3, 4, 4));
    entries.extend(check_layer("relu", &layer_with_random_params(LayerKind::Relu, &mut rng)?, &x, &mut rng)?);

    let x = distinct_blocks(&mut rng, Shape::new(2, 3, 4, 4));
    entries.extend(check_layer("maxpool2", &layer_with_random_params(LayerKind::MaxPool2, &mut rng)?, &x, &mut rng)?);

    let dense = LayerKind::Dense {
        in_features: 12,
        out_features: 5,
    };
    let x = uniform(&mut rng, Shape::new(2, 3, 2, 2), -1.0, 1.0);
    let layer = layer_with_random_params(dense, &mut rng)?;
    entries.extend(check_layer("dense", &layer, &x, &mut rng)?);

    let x = uniform(&mut rng, Shape::new(2, 8, 1, 1), -1.0, 1.0);
    entries.extend(check_layer("l2norm", &layer_with_random_params(LayerKind::L2Norm, &mut rng)?, &x, &mut rng)?);

    let x = uniform(&mut rng, Shape::new(2, 3, 2, 2), -1.0, 1.0);
    entries.extend(check_layer("sigmoid", &layer_with_random_params(LayerKind::Sigmoid, &mut rng)?, &x, &mut rng)?);

    entries.extend(check_gates(&mut rng)?);
    Ok(GradcheckReport { entries })
}

fn check_gates(rng: &mut StreamRng) -> Result<Vec<CheckEntry>> {
    let shape = Shape::new(2, 4, 3, 3);
    let x = uniform(rng, shape, -1.0, 1.0);
    let p = AttentionMap::new(uniform(rng, shape.with_c(1), 0.05, 0.95))?;
    let r = uniform(rng, shape, -1.0, 1.0);
    let (dx, dp) = product_backward(&x, &p, &r)?;
    let project = |y: &Tensor| dot(y.data(), r.data());

    let mut entries = Vec::new();
    let mut cmp = Comparison::new("product_gate/dx", LAYER_TOL);
    let mut xv = x.data().to_vec();
    for i in 0..xv.len() {
        let num = central_difference(&mut xv, i, LAYER_STEP, |v| {
            project(&gate_forward_eval(&Tensor::from_parts(shape, v.to_vec()), &p).expect("valid gate"))
        });
        cmp.push(f64::from(dx.data()[i]), num);
    }
    entries.push(cmp.finish());

    let mut cmp = Comparison::new("product_gate/dp", LAYER_TOL);
    let mut pv = p.tensor().data().to_vec();
    for i in 0..pv.len() {
        let num = central_difference(&mut pv, i, LAYER_STEP, |v| {
            let pm = AttentionMap::new(Tensor::from_parts(shape.with_c(1), v.to_vec())).expect("interior p");
            project(&gate_forward_eval(&x, &pm).expect("valid gate"))
        });
        cmp.push(f64::from(dp.data()[i]), num);
    }
    entries.push(cmp.finish());

    // With the mask held fixed the training forward is linear in x.
    let mask = impdrop_sample_mask(&p, shape.c, StreamKey::from_raw(rng.random()))?;
    let dx = impdrop_backward_x(&mask, &r)?;
    let mut cmp = Comparison::new("impdrop_fixed_mask/dx", LAYER_TOL);
    for i in 0..xv.len() {
        let num = central_difference(&mut xv, i, LAYER_STEP, |v| {
            project(&impdrop_forward_train(&Tensor::from_parts(shape, v.to_vec()), &mask).expect("valid mask"))
        });
        cmp.push(f64::from(dx.data()[i]), num);
    }
    entries.push(cmp.finish());

    // The surrogate attention gradient must be the Product gradient exactly.
    let surrogate = impdrop_backward_p(&x, &r)?;
    let mut cmp = Comparison::new("impdrop_surrogate/dp", Tolerance { rel: 0.0, abs: 0.0 });
    for (&a, &b) in surrogate.data().iter().zip(dp.data()) {
        cmp.push(f64::from(a), f64::from(b));
    }
    entries.push(cmp.finish());
    Ok(entries)
}

/// Evaluation-mode network check: `n_params` scalar parameters sampled over
/// the whole network plus `n_params` sampled from the attention head.
pub fn check_network(config: &NetworkConfig, n_params: usize, seed: u64) -> Result<GradcheckReport> {
    let root = StreamKey::root(seed).label("gradcheck-network");
    let mut net = EmbeddingNet::build(config.clone(), root.label("init"))?;
    let mut rng = root.label("probe").rng();
    let image = uniform(&mut rng, config.image_shape(), 0.0, 1.0);
    let oracle = match config.attention_source {
        AttentionSource::OracleMask => Some(AttentionMap::new(uniform(&mut rng, net.plan().attention, 0.05, 0.95))?),
        AttentionSource::LearnedHead => None,
    };
    let key = StreamKey::root(0);
    let (emb, trace) = net.embed(&image, Phase::Eval, key, oracle.as_ref())?;
    let r = uniform(&mut rng, emb.shape(), -1.0, 1.0);
    let grads = net.backward(&trace, &r)?;

    let ids: Vec<(ParamId, usize)> = net.params().map(|(id, t)| (id, t.len())).collect();
    let scalars = |filter: &dyn Fn(ParamId) -> bool| -> Vec<(ParamId, usize)> {
        ids.iter()
            .filter(|(id, _)| filter(*id))
            .flat_map(|&(id, len)| (0..len).map(move |i| (id, i)))
            .collect()
    };
    let all = scalars(&|_| true);
    let head = scalars(&|id| net.block_of(id.layer) == Block::AttentionHead);

    let mut entries = Vec::new();
    let gated_head = config.gate_mode != GateMode::None && config.attention_source == AttentionSource::LearnedHead;
    let groups: Vec<(&str, &Vec<(ParamId, usize)>)> = if gated_head {
        vec![("network/sampled", &all), ("network/attention_head", &head)]
    } else {
        vec![("network/sampled", &all)]
    };
    let base_pattern = net.switch_pattern(&trace);
    for (name, pool) in groups {
        let mut cmp = Comparison::new(name, NETWORK_TOL);
        let want = n_params.min(pool.len());
        let mut order = sample(&mut rng, pool.len(), pool.len()).into_vec();
        let mut checked = 0;
        let mut straddled = 0;
        while checked < want {
            let Some(k) = order.pop() else { break };
            let (id, i) = pool[k];
            let analytic = f64::from(grads.get(id).expect("gradient for every parameter").data()[i]);
            let mut values = net.param(id).expect("parameter exists").data().to_vec();
            let mut same_piece = true;
            let numeric = central_difference(&mut values, i, NETWORK_STEP, |v| {
                net.param_mut(id)
                    .expect("parameter exists")
                    .data_mut()
                    .copy_from_slice(v);
                let (e, t) = net
                    .embed(&image, Phase::Eval, key, oracle.as_ref())
                    .expect("forward on checked network");
                same_piece &= net.switch_pattern(&t) == base_pattern;
                dot(e.data(), r.data())
            });
            net.param_mut(id).expect("parameter exists").data_mut().copy_from_slice(&values);
            if same_piece {
                cmp.push(analytic, numeric);
                checked += 1;
            } else {
                straddled += 1;
            }
        }
        let mut entry = cmp.finish();
        entry.skipped = straddled;
        entry.passed &= checked == want;
        entries.push(entry);
    }
    Ok(GradcheckReport { entries })
}

/// Configuration used by the network-scope check: the default desk network
/// with a Product gate and a learned head, so every block is on the path.
pub fn network_check_config() -> NetworkConfig {
    NetworkConfig {
        gate_mode: GateMode::Product,
        attention_source: AttentionSource::LearnedHead,
        ..NetworkConfig::default()
    }
}

pub fn gradcheck(scope: Scope, seed: u64, n_params: usize) -> Result<GradcheckReport> {
    match scope {
        Scope::Layer => check_layers(seed),
        Scope::Network => check_network(&network_check_config(), n_params, seed),
    }
}
