//! Dense row-major `f32` tensors and a reverse-mode autodiff tape.
//!
//! [`Tensor`] is a plain value. Differentiation happens on a [`Tape`]: every
//! forward pass records primitive applications as nodes, [`Tape::backward`]
//! walks them in reverse and returns a [`Gradients`] table. A tape lives for
//! one forward/backward pass and is then dropped.

mod grad_check;
pub(crate) mod kernels;
mod tape;

pub use grad_check::{compare_gradients, finite_difference_gradient, GradCheckReport};
pub use tape::{Gradients, Tape, Var};

use crate::error::{invalid_arg, shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(invalid_arg!("dimension sizes must be positive, got {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Builds a `[rows, cols]` tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err!("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Leading (batch) dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all but the leading dimension.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Gathers the given rows (leading-dimension indices) into a new tensor.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    /// Row-wise argmax; ties resolve to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let row = self.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Little-endian bytes of the data buffer.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Plain (untracked) matrix product of `[m,k]` and `[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = kernels::matmul_dims(a.shape(), b.shape())?;
    Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
}

/// Temperature-softened softmax over the last axis of a `[n, C]` tensor.
///
/// Each row is `exp(z_j / tau) / sum_k exp(z_k / tau)`, evaluated after
/// subtracting the row maximum.
pub fn softmax_with_temperature(z: &Tensor, tau: f32) -> Result<Tensor> {
    check_softmax_args(z, tau)?;
    let classes = z.shape()[1];
    Tensor::new(
        z.shape().to_vec(),
        kernels::softmax_rows(z.data(), classes, tau),
    )
}

pub(crate) fn check_softmax_args(z: &Tensor, tau: f32) -> Result<()> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(invalid_arg!("temperature must be positive and finite, got {tau}"));
    }
    if z.rank() != 2 {
        return Err(shape_err!("softmax expects [n, C], got {:?}", z.shape()));
    }
    if z.shape()[1] < 2 {
        return Err(invalid_arg!("softmax needs at least two classes"));
    }
    if !z.all_finite() {
        return Err(crate::error::Error::NonFinite("logits contain NaN or Inf".into()));
    }
    Ok(())
}
