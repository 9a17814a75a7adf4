//! Dense rank-4 `f32` tensors in row-major (N, C, H, W) order.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents of a rank-4 tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0
    }

    pub fn with_n(self, n: usize) -> Self {
        Shape { n, ..self }
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    fn check_nonempty(self) -> Result<Self> {
        if self.is_empty() {
            Err(Error::ZeroExtent(self))
        } else {
            Ok(self)
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(s: [usize; 4]) -> Self {
        Shape::new(s[0], s[1], s[2], s[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    N,
    C,
    H,
    W,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    /// Tensor of `shape` with every element equal to `fill`.
    pub fn new(shape: impl Into<Shape>, fill: f32) -> Result<Self> {
        let shape = shape.into().check_nonempty()?;
        if !fill.is_finite() {
            return Err(Error::NonFinite("tensor fill".into()));
        }
        Ok(Tensor {
            shape,
            data: vec![fill; shape.numel()],
        })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Result<Self> {
        Self::new(shape, 0.0)
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into().check_nonempty()?;
        if data.len() != shape.numel() {
            return Err(Error::DataLength {
                shape,
                expected: shape.numel(),
                got: data.len(),
            });
        }
        let t = Tensor { shape, data };
        t.ensure_finite("tensor construction")?;
        Ok(t)
    }

    /// Internal constructor for results whose shape is already validated.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.shape.offset(n, c, h, w)]
    }

    /// Contiguous slice holding sample `n`.
    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.shape.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn ensure_shape(&self, expected: Shape) -> Result<()> {
        if self.shape == expected {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected,
                got: self.shape,
            })
        }
    }

    /// Same data under a different shape with the same element count.
    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into().check_nonempty()?;
        if shape.numel() != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: self.shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Element-wise `a op b`; shapes must match exactly.
    pub fn ew_binary(&self, other: &Tensor, op: BinaryOp) -> Result<Tensor> {
        other.ensure_shape(self.shape)?;
        let data: Vec<f32> = match op {
            BinaryOp::Add => self.zip_map(other, |a, b| a + b),
            BinaryOp::Sub => self.zip_map(other, |a, b| a - b),
            BinaryOp::Mul => self.zip_map(other, |a, b| a * b),
        };
        let t = Tensor::from_parts(self.shape, data);
        t.ensure_finite("element-wise op")?;
        Ok(t)
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect()
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.ew_binary(other, BinaryOp::Add)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.ew_binary(other, BinaryOp::Mul)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        other.ensure_shape(self.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f32) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_parts(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Sum over `axes`; reduced axes collapse to extent 1. Accumulates in f64.
    pub fn reduce_sum(&self, axes: &[Axis]) -> Result<Tensor> {
        let s = self.shape;
        let keep = |a: Axis, e: usize| if axes.contains(&a) { 1 } else { e };
        let out_shape = Shape::new(
            keep(Axis::N, s.n),
            keep(Axis::C, s.c),
            keep(Axis::H, s.h),
            keep(Axis::W, s.w),
        );
        let mut acc = vec![0f64; out_shape.numel()];
        let pick = |a: Axis, i: usize| if axes.contains(&a) { 0 } else { i };
        let mut idx = 0;
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        let o = out_shape.offset(
                            pick(Axis::N, n),
                            pick(Axis::C, c),
                            pick(Axis::H, h),
                            pick(Axis::W, w),
                        );
                        acc[o] += f64::from(self.data[idx]);
                        idx += 1;
                    }
                }
            }
        }
        let t = Tensor::from_parts(out_shape, acc.into_iter().map(|v| v as f32).collect());
        t.ensure_finite("reduce_sum")?;
        Ok(t)
    }

    /// Sum of all elements in f64.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0f32, |m, v| m.max(v.abs()))
    }

    /// Stack single-sample tensors of equal shape along N.
    pub fn stack(samples: &[&Tensor]) -> Result<Tensor> {
        let first = samples.first().ok_or(Error::Empty("tensor stack"))?;
        let per = first.shape;
        let mut data = Vec::with_capacity(per.numel() * samples.len());
        for s in samples {
            s.ensure_shape(per)?;
            data.extend_from_slice(&s.data);
        }
        Ok(Tensor::from_parts(per.with_n(per.n * samples.len()), data))
    }

    /// Serialize into the binary blob format: four little-endian `u32`
    /// extents (N, C, H, W) followed by the little-endian `f32` payload.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        for e in [self.shape.n, self.shape.c, self.shape.h, self.shape.w] {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parse a blob; `path` is only used for error messages.
    pub fn from_blob(bytes: &[u8], path: &Path) -> Result<Tensor> {
        let short = || Error::ShortRead {
            path: path.to_path_buf(),
        };
        if bytes.len() < 16 {
            return Err(short());
        }
        let mut ext = [0usize; 4];
        for (i, e) in ext.iter_mut().enumerate() {
            let b: [u8; 4] = bytes[4 * i..4 * i + 4].try_into().expect("4-byte slice");
            *e = u32::from_le_bytes(b) as usize;
        }
        let shape = Shape::from(ext);
        let payload = &bytes[16..];
        let want = shape
            .numel()
            .checked_mul(4)
            .ok_or_else(|| Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("extents {shape} overflow"),
            })?;
        if payload.len() < want {
            return Err(short());
        }
        if payload.len() > want {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("{} trailing bytes", payload.len() - want),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Tensor::from_vec(shape, data).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn write_blob(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_blob()).map_err(|e| Error::io(path, e))
    }

    pub fn read_blob(path: &Path) -> Result<Tensor> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_blob(&bytes, path)
    }
}

/// f64-accumulated dot product.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}
