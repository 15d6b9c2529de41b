//! Dense f64 tensors: contiguous row-major storage, shape metadata, and an
//! optional gradient slot.
//!
//! Everything numeric in this crate flows through [`Tensor`]. Construction
//! validates the shape/data agreement and rejects non-finite values, so a
//! tensor that exists is a tensor that is safe to compute with.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements but data has {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("dimension {dim} of shape {shape:?} is zero; all dimensions must be positive")]
    ZeroDimension { shape: Vec<usize>, dim: usize },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("gradient has {grad_len} elements, data has {data_len}")]
    GradLenMismatch { grad_len: usize, data_len: usize },
}

/// Dense n-dimensional array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    /// Same length as `data` when present; managed by the tape and optimizer.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking the shape/data invariants and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if let Some(dim) = shape.iter().position(|&d| d == 0) {
            return Err(TensorError::ZeroDimension { shape, dim });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { index, value });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Like [`Tensor::new`] but skips the finiteness scan. For internal op
    /// outputs whose inputs were already validated.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// n-by-n identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor {
            shape: vec![n, n],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        flat
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Replaces the gradient slot, validating its length.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), TensorError> {
        if grad.len() != self.data.len() {
            return Err(TensorError::GradLenMismatch {
                grad_len: grad.len(),
                data_len: self.data.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Compact shape rendering for error messages: `[3, 8, 112, 112]`.
pub fn fmt_shape(shape: &[usize]) -> String {
    format!("{shape:?}")
}
