//! Differentiable layers with explicit forward and backward passes.
//!
//! Every layer works on whole batches `(N, C, H, W)`. Reductions (conv and
//! dense sums, norms) accumulate in `f64` and round once on store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, Shape, Tensor};

pub const L2_EPS: f64 = 1e-12;

/// Declarative layer description used in network configs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    #[serde(rename = "maxpool2")]
    MaxPool2,
    Dense {
        out_features: usize,
    },
    #[serde(rename = "l2norm")]
    L2Norm,
    Sigmoid,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    /// Fix input-dependent dimensions for a per-sample input of shape `input`.
    pub fn resolve(&self, input: Shape) -> LayerKind {
        match *self {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => LayerKind::Conv2d {
                in_channels: input.c,
                out_channels,
                kernel,
                stride,
                padding,
            },
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::MaxPool2 => LayerKind::MaxPool2,
            LayerSpec::Dense { out_features } => LayerKind::Dense {
                in_features: input.sample_len(),
                out_features,
            },
            LayerSpec::L2Norm => LayerKind::L2Norm,
            LayerSpec::Sigmoid => LayerKind::Sigmoid,
        }
    }

    pub fn conv(out_channels: usize, kernel: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride: 1,
            padding,
        }
    }
}

/// A layer with its input dimensions resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    #[serde(rename = "maxpool2")]
    MaxPool2,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    #[serde(rename = "l2norm")]
    L2Norm,
    Sigmoid,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2 => "maxpool2",
            LayerKind::Dense { .. } => "dense",
            LayerKind::L2Norm => "l2norm",
            LayerKind::Sigmoid => "sigmoid",
        }
    }

    pub fn weight_shape(&self) -> Option<Shape> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(Shape::new(out_channels, in_channels, kernel, kernel)),
            LayerKind::Dense {
                in_features,
                out_features,
            } => Some(Shape::new(1, out_features, 1, in_features)),
            _ => None,
        }
    }

    pub fn bias_shape(&self) -> Option<Shape> {
        match *self {
            LayerKind::Conv2d { out_channels, .. } => Some(Shape::new(1, out_channels, 1, 1)),
            LayerKind::Dense { out_features, .. } => Some(Shape::new(1, out_features, 1, 1)),
            _ => None,
        }
    }

    /// Output shape for an input of shape `x`, or an error if incompatible.
    pub fn output_shape(&self, x: Shape) -> Result<Shape> {
        if x.is_empty() {
            return Err(Error::ZeroExtent(x));
        }
        let incompatible = |why: String| Error::Config(format!("{} on {x}: {why}", self.name()));
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if x.c != in_channels {
                    return Err(incompatible(format!("expected {in_channels} channels")));
                }
                if kernel == 0 || stride == 0 {
                    return Err(incompatible("kernel and stride must be positive".into()));
                }
                if x.h + 2 * padding < kernel || x.w + 2 * padding < kernel {
                    return Err(incompatible("kernel larger than padded input".into()));
                }
                let ho = (x.h + 2 * padding - kernel) / stride + 1;
                let wo = (x.w + 2 * padding - kernel) / stride + 1;
                Ok(Shape::new(x.n, out_channels, ho, wo))
            }
            LayerKind::MaxPool2 => {
                if x.h < 2 || x.w < 2 {
                    return Err(incompatible("spatial extents below 2".into()));
                }
                Ok(Shape::new(x.n, x.c, x.h / 2, x.w / 2))
            }
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                if x.sample_len() != in_features {
                    return Err(incompatible(format!("expected {in_features} features")));
                }
                Ok(Shape::new(x.n, out_features, 1, 1))
            }
            LayerKind::Relu | LayerKind::L2Norm | LayerKind::Sigmoid => Ok(x),
        }
    }
}

/// Parameters of one layer. Parameterless kinds carry `None` for both.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub weights: Option<Tensor>,
    pub bias: Option<Tensor>,
}

/// Gradients produced by [`Layer::backward`].
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub dx: Tensor,
    pub dweights: Option<Tensor>,
    pub dbias: Option<Tensor>,
}

/// Values saved by a forward call for the matching backward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input_shape: Shape,
    output_shape: Shape,
    saved: Saved,
}

#[derive(Debug, Clone)]
enum Saved {
    Input(Tensor),
    Argmax(Vec<u32>),
    Output(Tensor),
    Normalized { output: Tensor, norms: Vec<f64> },
}

impl ForwardCache {
    pub fn output_shape(&self) -> Shape {
        self.output_shape
    }
}

impl Layer {
    /// Append the piecewise branch taken by each unit in `cache`: ReLU sign
    /// bits and maxpool winners. Smooth layers append nothing.
    pub fn switch_pattern(&self, cache: &ForwardCache, out: &mut Vec<u32>) {
        match (&self.kind, &cache.saved) {
            (LayerKind::Relu, Saved::Input(x)) => out.extend(x.data().iter().map(|&v| u32::from(v > 0.0))),
            (LayerKind::MaxPool2, Saved::Argmax(idx)) => out.extend_from_slice(idx),
            _ => {}
        }
    }
}

impl Layer {
    /// Resolve `spec` against a per-sample input shape and initialize
    /// parameters: Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(spec: &LayerSpec, input: Shape, rng: &mut R) -> Result<Layer> {
        let kind = spec.resolve(input);
        let out = kind.output_shape(input)?;
        if out.is_empty() {
            return Err(Error::ZeroExtent(out));
        }
        let (weights, bias) = match (kind.weight_shape(), kind.bias_shape()) {
            (Some(ws), Some(bs)) => {
                let (fan_in, fan_out) = match kind {
                    LayerKind::Conv2d {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    } => (in_channels * kernel * kernel, out_channels * kernel * kernel),
                    LayerKind::Dense {
                        in_features,
                        out_features,
                    } => (in_features, out_features),
                    _ => unreachable!(),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                let w: Vec<f32> = (0..ws.numel())
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                (Some(Tensor::from_vec(ws, w)?), Some(Tensor::zeros(bs)?))
            }
            _ => (None, None),
        };
        Ok(Layer {
            kind,
            weights,
            bias,
        })
    }

    /// Layer with explicit parameters; shapes are validated against `kind`.
    pub fn with_params(kind: LayerKind, weights: Option<Tensor>, bias: Option<Tensor>) -> Result<Layer> {
        check_param(kind.weight_shape(), weights.as_ref(), kind.name())?;
        check_param(kind.bias_shape(), bias.as_ref(), kind.name())?;
        Ok(Layer {
            kind,
            weights,
            bias,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.as_ref().map_or(0, Tensor::len) + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let in_shape = x.shape();
        let out_shape = self.kind.output_shape(in_shape)?;
        let (y, saved) = match self.kind {
            LayerKind::Conv2d { stride, padding, .. } => {
                let y = conv_forward(x, self.w(), self.b(), stride, padding, out_shape);
                (round(out_shape, y), Saved::Input(x.clone()))
            }
            LayerKind::Relu => (x.map(|v| v.max(0.0)), Saved::Input(x.clone())),
            LayerKind::MaxPool2 => {
                let (y, idx) = maxpool_forward(x, out_shape);
                (y, Saved::Argmax(idx))
            }
            LayerKind::Dense { .. } => {
                let y = dense_forward(x, self.w(), self.b(), out_shape);
                (round(out_shape, y), Saved::Input(x.clone()))
            }
            LayerKind::L2Norm => {
                let (y, norms) = l2norm_forward(x);
                let y = round(out_shape, y);
                (y.clone(), Saved::Normalized { output: y, norms })
            }
            LayerKind::Sigmoid => {
                let y = round(out_shape, x.data().iter().map(|&v| sigmoid(v)).collect());
                (y.clone(), Saved::Output(y))
            }
        };
        y.ensure_finite(self.kind.name())?;
        Ok((
            y,
            ForwardCache {
                input_shape: in_shape,
                output_shape: out_shape,
                saved,
            },
        ))
    }

    /// Forward output before the final rounding to `f32`. Finite-difference
    /// checks difference this to stay clear of output quantization.
    pub fn forward_wide(&self, x: &Tensor) -> Result<Vec<f64>> {
        let out_shape = self.kind.output_shape(x.shape())?;
        let y = match self.kind {
            LayerKind::Conv2d { stride, padding, .. } => conv_forward(x, self.w(), self.b(), stride, padding, out_shape),
            LayerKind::Dense { .. } => dense_forward(x, self.w(), self.b(), out_shape),
            LayerKind::L2Norm => l2norm_forward(x).0,
            LayerKind::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
            LayerKind::Relu | LayerKind::MaxPool2 => {
                let (y, _) = self.forward(x)?;
                y.data().iter().map(|&v| f64::from(v)).collect()
            }
        };
        if y.iter().all(|v| v.is_finite()) {
            Ok(y)
        } else {
            Err(Error::NonFinite(self.kind.name().into()))
        }
    }

    pub fn backward(&self, cache: &ForwardCache, dy: &Tensor) -> Result<LayerGrads> {
        dy.ensure_shape(cache.output_shape)?;
        let mismatch = || Error::TraceMismatch(format!("cache does not belong to a {} layer", self.kind.name()));
        let grads = match (self.kind, &cache.saved) {
            (LayerKind::Conv2d { stride, padding, .. }, Saved::Input(x)) => {
                let (dx, dw, db) = conv_backward(x, self.w(), dy, stride, padding);
                LayerGrads {
                    dx,
                    dweights: Some(dw),
                    dbias: Some(db),
                }
            }
            (LayerKind::Relu, Saved::Input(x)) => {
                let data = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                    .collect();
                LayerGrads {
                    dx: Tensor::from_parts(x.shape(), data),
                    dweights: None,
                    dbias: None,
                }
            }
            (LayerKind::MaxPool2, Saved::Argmax(idx)) => {
                let mut dx = vec![0f32; cache.input_shape.numel()];
                for (&i, &g) in idx.iter().zip(dy.data()) {
                    dx[i as usize] += g;
                }
                LayerGrads {
                    dx: Tensor::from_parts(cache.input_shape, dx),
                    dweights: None,
                    dbias: None,
                }
            }
            (LayerKind::Dense { .. }, Saved::Input(x)) => {
                let (dx, dw, db) = dense_backward(x, self.w(), dy);
                LayerGrads {
                    dx,
                    dweights: Some(dw),
                    dbias: Some(db),
                }
            }
            (LayerKind::L2Norm, Saved::Normalized { output, norms }) => LayerGrads {
                dx: l2norm_backward(output, norms, dy),
                dweights: None,
                dbias: None,
            },
            (LayerKind::Sigmoid, Saved::Output(y)) => {
                let data = y
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                LayerGrads {
                    dx: Tensor::from_parts(y.shape(), data),
                    dweights: None,
                    dbias: None,
                }
            }
            _ => return Err(mismatch()),
        };
        grads.dx.ensure_finite(self.kind.name())?;
        Ok(grads)
    }

    fn w(&self) -> &Tensor {
        self.weights.as_ref().expect("parametric layer has weights")
    }

    fn b(&self) -> &Tensor {
        self.bias.as_ref().expect("parametric layer has bias")
    }
}

fn check_param(expected: Option<Shape>, got: Option<&Tensor>, name: &str) -> Result<()> {
    match (expected, got) {
        (None, None) => Ok(()),
        (Some(s), Some(t)) => t.ensure_shape(s),
        (Some(_), None) => Err(Error::Config(format!("{name} requires parameters"))),
        (None, Some(_)) => Err(Error::Config(format!("{name} takes no parameters"))),
    }
}

fn sigmoid(v: f32) -> f64 {
    let v = f64::from(v);
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Output indices `o` in `0..out_len` with `o * stride + offset - pad` in `0..in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: usize, pad: usize) -> (usize, usize) {
    // o*stride + offset >= pad
    let lo = if offset >= pad {
        0
    } else {
        (pad - offset).div_ceil(stride)
    };
    // o*stride + offset - pad <= in_len - 1
    let hi = if in_len + pad > offset {
        ((in_len + pad - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn round(shape: Shape, wide: Vec<f64>) -> Tensor {
    Tensor::from_parts(shape, wide.into_iter().map(|v| v as f32).collect())
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize, out: Shape) -> Vec<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let (cin, k) = (ws.c, ws.h);
    let (ho, wo) = (out.h, out.w);
    let xd = x.data();
    let wd = w.data();
    let mut y = vec![0f64; out.numel()];
    for n in 0..xs.n {
        for co in 0..out.c {
            let acc = &mut y[out.offset(n, co, 0, 0)..][..ho * wo];
            acc.fill(f64::from(b.data()[co]));
            for ci in 0..cin {
                let plane = &xd[xs.offset(n, ci, 0, 0)..][..xs.plane()];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(ho, xs.h, stride, ky, pad);
                    for kx in 0..k {
                        let wv = f64::from(wd[((co * cin + ci) * k + ky) * k + kx]);
                        let (ox0, ox1) = valid_range(wo, xs.w, stride, kx, pad);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let row = &plane[iy * xs.w..(iy + 1) * xs.w];
                            let arow = &mut acc[oy * wo + ox0..oy * wo + ox1];
                            let ix0 = ox0 * stride + kx - pad;
                            if stride == 1 {
                                for (a, &v) in arow.iter_mut().zip(&row[ix0..]) {
                                    *a += wv * f64::from(v);
                                }
                            } else {
                                for (j, a) in arow.iter_mut().enumerate() {
                                    *a += wv * f64::from(row[ix0 + j * stride]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv_backward(x: &Tensor, w: &Tensor, dy: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let ws = w.shape();
    let ds = dy.shape();
    let (cout, cin, k) = (ws.n, ws.c, ws.h);
    let (ho, wo) = (ds.h, ds.w);
    let xd = x.data();
    let wd = w.data();
    let gd = dy.data();

    let mut dw = vec![0f64; ws.numel()];
    let mut db = vec![0f64; cout];
    let mut dx = vec![0f32; xs.numel()];
    let mut dx_acc = vec![0f64; xs.plane()];

    for n in 0..xs.n {
        for co in 0..cout {
            let g = &gd[ds.offset(n, co, 0, 0)..][..ho * wo];
            db[co] += g.iter().map(|&v| f64::from(v)).sum::<f64>();
        }
        for ci in 0..cin {
            let plane = &xd[xs.offset(n, ci, 0, 0)..][..xs.plane()];
            dx_acc.fill(0.0);
            for co in 0..cout {
                let g = &gd[ds.offset(n, co, 0, 0)..][..ho * wo];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(ho, xs.h, stride, ky, pad);
                    for kx in 0..k {
                        let widx = ((co * cin + ci) * k + ky) * k + kx;
                        let wv = f64::from(wd[widx]);
                        let (ox0, ox1) = valid_range(wo, xs.w, stride, kx, pad);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let ix0 = ox0 * stride + kx - pad;
                        let mut wsum = 0f64;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let grow = &g[oy * wo + ox0..oy * wo + ox1];
                            let xrow = &plane[iy * xs.w..(iy + 1) * xs.w];
                            let drow = &mut dx_acc[iy * xs.w..(iy + 1) * xs.w];
                            if stride == 1 {
                                for ((&gv, &xv), d) in grow.iter().zip(&xrow[ix0..]).zip(&mut drow[ix0..]) {
                                    let gv = f64::from(gv);
                                    wsum += gv * f64::from(xv);
                                    *d += wv * gv;
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let gv = f64::from(gv);
                                    let ix = ix0 + j * stride;
                                    wsum += gv * f64::from(xrow[ix]);
                                    drow[ix] += wv * gv;
                                }
                            }
                        }
                        dw[widx] += wsum;
                    }
                }
            }
            let dst = &mut dx[xs.offset(n, ci, 0, 0)..][..xs.plane()];
            for (d, &a) in dst.iter_mut().zip(&dx_acc) {
                *d = a as f32;
            }
        }
    }
    (
        Tensor::from_parts(xs, dx),
        Tensor::from_parts(ws, dw.into_iter().map(|v| v as f32).collect()),
        Tensor::from_parts(Shape::new(1, cout, 1, 1), db.into_iter().map(|v| v as f32).collect()),
    )
}

fn maxpool_forward(x: &Tensor, out: Shape) -> (Tensor, Vec<u32>) {
    let xs = x.shape();
    let xd = x.data();
    let mut y = Vec::with_capacity(out.numel());
    let mut idx = Vec::with_capacity(out.numel());
    for n in 0..xs.n {
        for c in 0..xs.c {
            for oy in 0..out.h {
                for ox in 0..out.w {
                    let mut best = xs.offset(n, c, 2 * oy, 2 * ox);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = xs.offset(n, c, 2 * oy + dy, 2 * ox + dx);
                        // strict comparison keeps the first row-major maximum
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    y.push(xd[best]);
                    idx.push(best as u32);
                }
            }
        }
    }
    (Tensor::from_parts(out, y), idx)
}

fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor, out: Shape) -> Vec<f64> {
    let n = x.shape().n;
    let fin = x.shape().sample_len();
    let fout = out.c;
    let wd = w.data();
    let mut y = Vec::with_capacity(n * fout);
    for s in 0..n {
        let xv = x.sample(s);
        for o in 0..fout {
            let row = &wd[o * fin..(o + 1) * fin];
            y.push(f64::from(b.data()[o]) + dot(row, xv));
        }
    }
    y
}

fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let n = x.shape().n;
    let fin = x.shape().sample_len();
    let fout = dy.shape().c;
    let wd = w.data();
    let gd = dy.data();
    let mut dx = Vec::with_capacity(n * fin);
    let mut dw = vec![0f64; fout * fin];
    let mut db = vec![0f64; fout];
    let mut acc = vec![0f64; fin];
    for s in 0..n {
        let xv = x.sample(s);
        acc.fill(0.0);
        for o in 0..fout {
            let g = f64::from(gd[s * fout + o]);
            db[o] += g;
            let row = &wd[o * fin..(o + 1) * fin];
            let drow = &mut dw[o * fin..(o + 1) * fin];
            for ((a, &wv), (d, &xi)) in acc.iter_mut().zip(row).zip(drow.iter_mut().zip(xv)) {
                *a += g * f64::from(wv);
                *d += g * f64::from(xi);
            }
        }
        dx.extend(acc.iter().map(|&v| v as f32));
    }
    (
        Tensor::from_parts(x.shape(), dx),
        Tensor::from_parts(w.shape(), dw.into_iter().map(|v| v as f32).collect()),
        Tensor::from_parts(Shape::new(1, fout, 1, 1), db.into_iter().map(|v| v as f32).collect()),
    )
}

fn l2norm_forward(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = x.shape().n;
    let mut y = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(n);
    for s in 0..n {
        let v = x.sample(s);
        let norm = dot(v, v).sqrt();
        let d = norm.max(L2_EPS);
        y.extend(v.iter().map(|&e| f64::from(e) / d));
        norms.push(norm);
    }
    (y, norms)
}

fn l2norm_backward(y: &Tensor, norms: &[f64], dy: &Tensor) -> Tensor {
    let mut dx = Vec::with_capacity(y.len());
    for (s, &norm) in norms.iter().enumerate() {
        let yv = y.sample(s);
        let g = dy.sample(s);
        if norm >= L2_EPS {
            let proj = dot(yv, g);
            dx.extend(
                yv.iter()
                    .zip(g)
                    .map(|(&yi, &gi)| ((f64::from(gi) - f64::from(yi) * proj) / norm) as f32),
            );
        } else {
            dx.extend(g.iter().map(|&gi| (f64::from(gi) / L2_EPS) as f32));
        }
    }
    Tensor::from_parts(y.shape(), dx)
}
