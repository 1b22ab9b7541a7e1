//! N-dimensional dense tensor over `f32`/`f64` with an attached gradient slot.

use std::fmt;

use crate::{Result, TensorError};

/// Element type code, also used as the on-disk dtype tag in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::F64 => write!(f, "f64"),
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` and `f64` only.
pub trait Element:
    num_traits::Float + num_traits::NumAssignOps + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Little-endian byte image, appended to `out`.
    fn write_le(self, out: &mut Vec<u8>);

    /// Inverse of [`Element::write_le`]; `bytes.len()` must equal the dtype size.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte f32"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte f64"))
    }
}

/// Row-major dense tensor. Every extent is positive; `data.len()` equals the
/// product of the extents at all times.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    dims: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(dims: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(TensorError::invalid(
                "Tensor::new",
                format!("dimension {pos} has zero extent in {dims:?}"),
            ));
        }
        let numel: usize = dims.iter().product();
        if data.len() != numel {
            return Err(TensorError::shape(
                "Tensor::new",
                format!("dims {dims:?} imply {numel} elements, data has {}", data.len()),
            ));
        }
        Ok(Tensor { dims, data, requires_grad: false, grad: None })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let numel = dims.iter().product();
        Tensor { dims, data: vec![E::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn full(dims: Vec<usize>, value: E) -> Self {
        let numel = dims.iter().product();
        Tensor { dims, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: E) -> Self {
        Tensor { dims: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(usize) -> E) -> Self {
        let numel = dims.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Tensor { dims, data, requires_grad: false, grad: None }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        E::DTYPE
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) -> &mut Self {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
        self
    }

    /// Builder form of [`Tensor::set_requires_grad`].
    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<E>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::shape(
                "Tensor::set_grad",
                format!("gradient has {} elements, tensor has {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Elementwise map preserving shape. The result carries no gradient.
    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// True when shapes and raw values match exactly (gradients ignored).
    pub fn bit_eq(&self, other: &Tensor<E>) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}
