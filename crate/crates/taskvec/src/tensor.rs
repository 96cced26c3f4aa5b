//! Dense row-major f32 tensors and shape utilities.
//!
//! Every numeric value in the crate lives in a [`Tensor`]: model weights,
//! hidden states, gradients, task-vector deltas. Data is a flat row-major
//! `Vec<f32>` with an explicit shape; `product(shape) == data.len()` always
//! holds for a constructed tensor.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: format!("shape product != data length {}", data.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: "zero-sized dimension".into(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().product::<usize>() == 1
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the flat data under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }
}

/// Numpy-style broadcast of two shapes (align right, 1s stretch).
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], offset_from_right: usize) -> usize {
    if offset_from_right < shape.len() {
        shape[shape.len() - 1 - offset_from_right]
    } else {
        1
    }
}

/// Row-major strides, with stride 0 for broadcast dimensions relative to `out_rank`.
pub fn broadcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let mut strides = vec![0usize; out_rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        let out_i = out_rank - shape.len() + i;
        strides[out_i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Iterate all multi-indices of `shape`, yielding flat offsets for two
/// broadcast operands. Calls `f(out_flat, a_flat, b_flat)`.
pub fn for_each_broadcast2(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut a_off = 0usize;
    let mut b_off = 0usize;
    for out_flat in 0..numel {
        f(out_flat, a_off, b_off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            a_off += a_strides[d];
            b_off += b_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            a_off -= a_strides[d] * out_shape[d];
            b_off -= b_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Sum `grad` (shaped `grad_shape`) down to `target_shape`, undoing broadcast.
pub fn reduce_to_shape(grad: &[f32], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f32> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let target_numel: usize = target_shape.iter().product();
    let mut out = vec![0.0f32; target_numel];
    let rank = grad_shape.len();
    let t_strides = broadcast_strides(target_shape, rank);
    let mut idx = vec![0usize; rank];
    let mut t_off = 0usize;
    for g in grad {
        out[t_off] += *g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            t_off += t_strides[d];
            if idx[d] < grad_shape[d] {
                break;
            }
            t_off -= t_strides[d] * grad_shape[d];
            idx[d] = 0;
        }
    }
    out
}
