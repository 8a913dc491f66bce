//! Dense row-major tensors with a reverse-mode gradient tape.
//!
//! Every operation whose operands require gradients records itself on the
//! output node; [`Tensor::backward`] walks the recorded graph once in reverse
//! topological order and consumes it. Storage is shared through `Arc`, so
//! binding network weights into a fresh graph is cheap.

mod autograd;
pub mod check;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub(crate) use ops::Op;
pub use ops::UnaryKind;

/// Layer-norm stabilizer added to the variance.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Tensor<T: Real>(Rc<Node<T>>);

pub(crate) struct Node<T: Real> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    op: RefCell<Option<Op<T>>>,
    grad: RefCell<Option<Vec<T>>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    fn from_node(shape: Vec<usize>, data: Arc<Vec<T>>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        Tensor(Rc::new(Node {
            shape,
            data,
            requires_grad,
            op: RefCell::new(op),
            grad: RefCell::new(None),
        }))
    }

    pub(crate) fn check_shape(shape: &[usize], len: usize) -> Result<()> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) || numel(shape) != len {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![len],
            });
        }
        Ok(())
    }

    /// Constant (non-differentiable) tensor.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::check_shape(shape, data.len())?;
        Ok(Self::from_node(shape.to_vec(), Arc::new(data), false, None))
    }

    /// Leaf tensor that accumulates a gradient on `backward`.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::check_shape(shape, data.len())?;
        Ok(Self::from_node(shape.to_vec(), Arc::new(data), true, None))
    }

    /// Leaf over shared storage.
    pub fn from_shared(shape: &[usize], data: Arc<Vec<T>>, requires_grad: bool) -> Result<Self> {
        Self::check_shape(shape, data.len())?;
        Ok(Self::from_node(shape.to_vec(), data, requires_grad, None))
    }

    pub fn scalar(v: T) -> Self {
        Self::from_node(vec![1], Arc::new(vec![v]), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self::from_node(shape.to_vec(), Arc::new(vec![v; numel(shape)]), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn shared_data(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.0.data)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.as_ref().clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when an operation is recorded on this node and not yet consumed.
    pub fn has_tape(&self) -> bool {
        self.0.op.borrow().is_some()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::from_node(self.0.shape.clone(), Arc::clone(&self.0.data), false, None)
    }

    /// Rows of a 2-D tensor as `(rows, cols)`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::ShapeMismatch {
                op: "dims2",
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

#[cfg(test)]
mod tests;
