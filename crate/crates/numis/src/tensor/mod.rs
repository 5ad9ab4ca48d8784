//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Tensors form a dynamically recorded acyclic graph: every differentiable
//! operation stores its parents and a backward rule. Calling [`backward`]
//! on a scalar loss walks the graph in reverse topological order and
//! accumulates gradients into every reachable tensor that requires them.
//! Reductions accumulate in f64 and round once at the end.

mod ops;
mod conv;

pub use conv::{conv2d, max_pool2d};
pub use ops::*;

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
}

type BackwardFn = Box<dyn Fn(&[f32], &[Tensor])>;

struct Inner {
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f32>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// A reference-counted handle to a node in the computation graph.
///
/// Cloning a `Tensor` is cheap and aliases the same storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .field("data", &self.inner.data.borrow())
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                reason: format!("shape implies {} elements, data has {}", numel, data.len()),
            });
        }
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    /// Leaf tensor tracked for gradients (a trainable parameter).
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Tensor, TensorError> {
        let t = Tensor::from_vec(shape, data)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::leaf(vec![1], vec![v], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::leaf(shape.to_vec(), vec![0.0; numel], false)
    }

    fn leaf(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f32>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires = parents.iter().any(|p| p.requires_grad());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(requires),
                grad: RefCell::new(None),
                parents,
                backward: if requires { Some(backward) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value; panics if the tensor has more than one element.
    pub fn item(&self) -> f32 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.inner.shape);
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Toggle gradient tracking on a leaf (used for backbone freezing).
    pub fn set_requires_grad(&self, v: bool) {
        self.inner.requires_grad.set(v);
        if !v {
            *self.inner.grad.borrow_mut() = None;
        }
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// In-place update of the underlying values (optimizer steps, loading).
    pub fn set_data(&self, data: Vec<f32>) {
        assert_eq!(data.len(), self.numel(), "set_data length mismatch");
        *self.inner.data.borrow_mut() = data;
    }

    /// Stable identity of the underlying storage, for parameter bookkeeping.
    pub fn id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    pub(crate) fn accumulate_grad(&self, g: &[f32]) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode backpropagation from a scalar loss.
    ///
    /// Every `requires_grad` tensor reachable from the loss receives its
    /// accumulated gradient; repeated calls without `zero_grad` accumulate.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.inner.shape.clone()));
        }
        let order = topo_order(self);
        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            if !t.requires_grad() {
                continue;
            }
            if let Some(back) = &t.inner.backward {
                let g = t.inner.grad.borrow().clone();
                if let Some(g) = g {
                    back(&g, &t.inner.parents);
                }
            }
        }
        Ok(())
    }
}

/// Post-order over the graph rooted at `root` (parents before children).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    // Iterative DFS; graphs from deep unrolled loops would overflow the stack
    // with the recursive form.
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((node, child)) = stack.pop() {
        if child < node.inner.parents.len() {
            let next = node.inner.parents[child].clone();
            stack.push((node, child + 1));
            if visited.insert(next.id()) {
                stack.push((next, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}
