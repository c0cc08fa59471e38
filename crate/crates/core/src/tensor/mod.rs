//! Dense `f32` tensors, a recording compute graph with reverse-mode
//! differentiation, and plain SGD.

mod gradcheck;
mod graph;
mod kernels;
mod optim;

pub use gradcheck::{audit_operations, GradCheck, GradCheckReport, OpAudit};
pub use graph::{BatchMoments, Graph, Var};
pub use optim::Sgd;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, SparcError};

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a [`Tensor`], used to route gradients from a
/// [`Graph`] back to the parameter they were recorded from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Row-major dense array of `f32` values with an optional gradient buffer.
#[derive(Debug, Clone)]
pub struct Tensor {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    frozen: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SparcError::dim(
                "tensor",
                format!("shape {shape:?} holds {numel} values but {} given", data.len()),
            ));
        }
        Ok(Tensor {
            id: TensorId::fresh(),
            shape,
            data,
            requires_grad: false,
            grad: None,
            frozen: false,
        })
    }

    /// A trainable tensor.
    pub fn parameter(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("consistent by construction")
    }

    pub fn id(&self) -> TensorId {
        self.id
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

    /// Raw mutable access. Bypasses the frozen flag, which only guards
    /// gradient updates.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f32]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.grad = None;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Exact bitwise comparison of shape and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
