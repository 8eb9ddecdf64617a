//! Dense rank-4 tensors (batch, channel, height, width) and a tape-based
//! reverse-mode differentiation engine.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{finite_diff_check, relative_error, GradReport};
pub use graph::{FocalSpec, Gradients, Graph, Var};
pub use params::{decode_checkpoint, encode_checkpoint, ParamStore};

use crate::error::{Error, Result};

pub type Dims = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: Dims, value: f64) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "tensor dims must be positive: {dims:?}");
        Tensor {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("tensor dims must be positive: {dims:?}")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} values for dims {dims:?}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            dims: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    /// Tensor of `f(index)` over the flat row-major index.
    pub fn from_fn(dims: Dims, f: impl FnMut(usize) -> f64) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: (0..n).map(f).collect(),
        }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(b, c, h, w)]
    }

    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.index(b, c, h, w);
        self.data[i] = v;
    }

    /// One `(height, width)` plane.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let n = self.dims[2] * self.dims[3];
        let start = (b * self.dims[1] + c) * n;
        &self.data[start..start + n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
