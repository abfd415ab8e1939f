//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value type (shape + flat data). Differentiable
//! computation goes through a [`tape::Tape`], which records every primitive
//! applied to its [`tape::Var`] handles and replays them in reverse on
//! [`tape::Tape::backward`]. [`gradcheck::grad_check`] verifies tape gradients
//! against central finite differences.

pub mod gradcheck;
mod ops;
mod serial;
pub mod tape;

use crate::error::{Error, Result};

pub use serial::{read_tensor, write_tensor, SHTN_MAGIC};

/// Element dtype tag used by the binary tensor format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

/// Floating-point element type of a [`Tensor`]. Implemented for `f32`
/// (training) and `f64` (gradient-check suites).
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    const BYTES: usize;

    fn from_f64c(v: f64) -> Self;
    fn to_f64c(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    const BYTES: usize = 4;

    fn from_f64c(v: f64) -> Self {
        v as f32
    }

    fn to_f64c(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    const BYTES: usize = 8;

    fn from_f64c(v: f64) -> Self {
        v
    }

    fn to_f64c(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Dense n-dimensional array, row-major. Rank 0 is a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![E::zero(); numel],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.data.len() != 1 {
            return Err(Error::Usage(format!(
                "item() on tensor with {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    /// Extent of dimension `axis` counted from the front.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<E>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "add_assign shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Change shape without touching data; element counts must agree.
    pub fn reshaped(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64c()).collect(),
        }
    }

    pub fn from_f64_tensor(t: &Tensor<f64>) -> Self {
        Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| E::from_f64c(v)).collect(),
        }
    }
}

/// Row-major strides of a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &extent) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= extent;
    }
    strides
}

/// Numpy-style broadcast of two shapes (align trailing dims; 1 stretches).
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::Shape(format!(
                "shapes {a:?} and {b:?} are not broadcastable"
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Strides for reading a tensor of `shape` as if broadcast to `target`
/// (stride 0 on stretched dims).
pub(crate) fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let pad = target.len() - shape.len();
    let base = strides_of(shape);
    let mut out = vec![0usize; target.len()];
    for i in 0..shape.len() {
        out[pad + i] = if shape[i] == 1 { 0 } else { base[i] };
    }
    out
}

/// Sum `grad` down to `target_shape`, undoing a broadcast. Used by every
/// broadcasting backward rule.
pub(crate) fn reduce_to_shape<E: Scalar>(grad: &Tensor<E>, target_shape: &[usize]) -> Tensor<E> {
    if grad.shape() == target_shape {
        return grad.clone();
    }
    let gshape = grad.shape().to_vec();
    let rank = gshape.len();
    let mut padded = vec![1usize; rank];
    let off = rank - target_shape.len();
    padded[off..].copy_from_slice(target_shape);

    let tstrides = strides_of(&padded);
    let mut out = Tensor::zeros(target_shape.to_vec());
    let mut coords = vec![0usize; rank];
    for &g in grad.data() {
        let mut tflat = 0;
        for d in 0..rank {
            if padded[d] != 1 {
                tflat += coords[d] * tstrides[d];
            }
        }
        out.data[tflat] = out.data[tflat] + g;
        for d in (0..rank).rev() {
            coords[d] += 1;
            if coords[d] < gshape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}
