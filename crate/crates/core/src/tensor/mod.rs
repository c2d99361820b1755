//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar output walks the tape in reverse and
//! returns the exact analytic gradient of every leaf that requires one.
//!
//! Only the layers used by the attention and expertise networks are
//! provided: affine maps, layer norm, softmax, multi-head self-attention,
//! 1×1 convolution, average pooling and the two training losses.

mod graph;
mod kernels;
mod layers;

pub use graph::{Gradients, Graph, Var};
pub use layers::{mhsa, MhsaParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("embedding dim {dim} not divisible by {heads} heads")]
    HeadDivisibility { dim: usize, heads: usize },
    #[error("input {h}x{w} smaller than pooling window {k}")]
    InputTooSmall { h: usize, w: usize, k: usize },
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss must be a scalar, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("target map is constant")]
    DegenerateTarget,
    #[error("non-finite value")]
    NonFinite,
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// A named learnable quantity: values plus an optional gradient slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let n: usize = dims.iter().product();
        if dims.contains(&0) || data.len() != n {
            return Err(shape_err(
                "tensor",
                format!("dims {dims:?} hold {n} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Ok(Tensor {
            dims,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn param(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        Ok(Tensor {
            requires_grad: true,
            ..Tensor::new(dims, data)?
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Replaces (never accumulates into) the gradient slot.
    pub fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}
