//! Dense row-major containers: generic parameter tensors, 4-D feature maps
//! and token grids.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// N-dimensional array used for parameters and their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::BadLength {
                expected: n,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Shape of a `[batch, channels, height, width]` activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dims4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims4 {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn sample(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }

    pub const fn with_batch(self, batch: usize) -> Self {
        Self { batch, ..self }
    }
}

/// Real-valued `[B, C, H, W]` activation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    dims: Dims4,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(dims: Dims4) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn filled(dims: Dims4, value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims4, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::EmptyTensor(dims));
        }
        if dims.len() != data.len() {
            return Err(Error::BadLength {
                expected: dims.len(),
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for b in 0..dims.batch {
            for c in 0..dims.channels {
                for y in 0..dims.height {
                    for x in 0..dims.width {
                        data.push(f(b, c, y, x));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.dims.channels + c) * self.dims.height + y) * self.dims.width + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(b, c, y, x)]
    }

    /// Contiguous `[C, H, W]` block of one batch element.
    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.dims.sample();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.dims.sample();
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let n = self.dims.plane();
        let start = (b * self.dims.channels + c) * n;
        &self.data[start..start + n]
    }

    /// Copies batch element `b` into a standalone `[1, C, H, W]` map.
    pub fn split_sample(&self, b: usize) -> FeatureMap {
        FeatureMap {
            dims: self.dims.with_batch(1),
            data: self.sample(b).to_vec(),
        }
    }

    /// Concatenates maps along the batch axis.
    pub fn stack(parts: &[FeatureMap]) -> Result<FeatureMap> {
        let first = parts
            .first()
            .ok_or(Error::EmptyTensor(Dims4::new(0, 0, 0, 0)))?;
        let unit = first.dims.with_batch(1);
        let mut data = Vec::with_capacity(unit.len() * parts.len());
        let mut batch = 0;
        for p in parts {
            if p.dims.with_batch(1) != unit {
                return Err(Error::ShapeMismatch {
                    left: first.dims,
                    right: p.dims,
                });
            }
            batch += p.dims.batch;
            data.extend_from_slice(&p.data);
        }
        Ok(FeatureMap {
            dims: unit.with_batch(batch),
            data,
        })
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.into()))
        }
    }

    pub fn ensure_same_dims(&self, other: &FeatureMap) -> Result<()> {
        if self.dims == other.dims {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                left: self.dims,
                right: other.dims,
            })
        }
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    pub(crate) fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Tokens `[B, L, D]` laid out over a `grid_h x grid_w` grid (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub batch: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl TokenGrid {
    pub fn zeros(batch: usize, grid_h: usize, grid_w: usize, dim: usize) -> Self {
        Self {
            batch,
            grid_h,
            grid_w,
            dim,
            data: vec![0.0; batch * grid_h * grid_w * dim],
        }
    }

    pub fn from_vec(batch: usize, grid_h: usize, grid_w: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        let expected = batch * grid_h * grid_w * dim;
        if expected != data.len() {
            return Err(Error::BadLength {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            batch,
            grid_h,
            grid_w,
            dim,
            data,
        })
    }

    /// Number of tokens per batch element.
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, b: usize, t: usize) -> &[f64] {
        let start = (b * self.len() + t) * self.dim;
        &self.data[start..start + self.dim]
    }
}
