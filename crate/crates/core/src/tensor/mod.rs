//! Dense rank-3 feature stacks and the arithmetic the rest of the crate is
//! built on.
//!
//! Data is stored feature-major, then row-major: element `(f, y, x)` lives at
//! `f * height * width + y * width + x`. Reductions accumulate in `f64`.

pub(crate) mod conv;
mod rng;

pub use conv::{conv2d, conv2d_kernel_grad, conv2d_transposed, ConvKernel, Padding};
pub use rng::{gaussian_fill, seeded_rng, uniform_fill, SeededRng};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Shape {
    pub features: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(features: usize, height: usize, width: usize) -> Self {
        Shape {
            features,
            height,
            width,
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.features * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_features(&self, features: usize) -> Self {
        Shape { features, ..*self }
    }

    pub fn index(&self, f: usize, y: usize, x: usize) -> usize {
        (f * self.height + y) * self.width + x
    }

    pub fn contains(&self, f: usize, y: usize, x: usize) -> bool {
        f < self.features && y < self.height && x < self.width
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.features, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if shape.features == 0 || shape.height == 0 || shape.width == 0 {
            return Err(Error::dim(format!("tensor dimensions must be >= 1, got {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::dim(format!(
                "tensor {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        assert!(!shape.is_empty(), "tensor dimensions must be >= 1");
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut t = Self::zeros(shape);
        let mut i = 0;
        for c in 0..shape.features {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    t.data[i] = f(c, y, x);
                    i += 1;
                }
            }
        }
        t
    }

    /// Kronecker delta at `(f, y, x)`.
    pub fn impulse(shape: Shape, f: usize, y: usize, x: usize) -> Self {
        let mut t = Self::zeros(shape);
        t.data[shape.index(f, y, x)] = 1.0;
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn features(&self) -> usize {
        self.shape.features
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
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

    pub fn get(&self, f: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.index(f, y, x)]
    }

    pub fn set(&mut self, f: usize, y: usize, x: usize, v: f32) {
        let i = self.shape.index(f, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, f: usize) -> &[f32] {
        let n = self.shape.plane_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn plane_mut(&mut self, f: usize) -> &mut [f32] {
        let n = self.shape.plane_len();
        &mut self.data[f * n..(f + 1) * n]
    }

    fn check_same(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{op}: shape mismatch {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, op: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.check_same(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reduce_sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Inner product `<self, other>` accumulated in `f64`.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same(other, "dot")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    /// One mean per feature plane.
    pub fn global_average(&self) -> Vec<f32> {
        let n = self.shape.plane_len() as f64;
        (0..self.features())
            .map(|f| (self.plane(f).iter().map(|&v| v as f64).sum::<f64>() / n) as f32)
            .collect()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks tensors along the feature axis.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::new();
        let mut features = 0;
        for p in parts {
            if p.height() != h || p.width() != w {
                return Err(Error::dim(format!(
                    "concat: spatial mismatch {} vs {}",
                    first.shape, p.shape
                )));
            }
            features += p.features();
            data.extend_from_slice(&p.data);
        }
        Tensor::new(Shape::new(features, h, w), data)
    }

    /// Copies features `start..end` into a new tensor.
    pub fn select_features(&self, start: usize, end: usize) -> Result<Tensor> {
        if start >= end || end > self.features() {
            return Err(Error::dim(format!(
                "feature range {start}..{end} invalid for {}",
                self.shape
            )));
        }
        let n = self.shape.plane_len();
        Tensor::new(
            self.shape.with_features(end - start),
            self.data[start * n..end * n].to_vec(),
        )
    }

    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }
}

/// `f64` working copy of a tensor, for chains of linear layers where
/// rounding between layers would add up.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Wide {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Wide {
    pub fn zeros(shape: Shape) -> Self {
        Wide {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Wide {
            shape: t.shape,
            data: t.data.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn plane(&self, f: usize) -> &[f64] {
        let n = self.shape.plane_len();
        &self.data[f * n..(f + 1) * n]
    }

    pub fn plane_mut(&mut self, f: usize) -> &mut [f64] {
        let n = self.shape.plane_len();
        &mut self.data[f * n..(f + 1) * n]
    }
}
