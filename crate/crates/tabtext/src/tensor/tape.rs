//! Computation tape: ordered record of primitive applications whose reverse
//! replay yields gradients for every gradient-tracked leaf.

use std::cell::{Cell, RefCell};

use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &mut dyn FnMut(usize, Tensor))>;

pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    /// Present only when this node has gradient-tracked ancestors.
    pub back: Option<BackwardFn>,
}

/// Single-threaded computation tape.
///
/// A tape built with [`Tape::new`] records adjoints; one built with
/// [`Tape::eval`] only computes forward values, which is what inference
/// paths use. Tensors recorded on a tape are never mutated.
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
    consumed: Cell<bool>,
}

impl Tape {
    /// Tape that records adjoints for backward passes.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            consumed: Cell::new(false),
        }
    }

    /// Forward-only tape; no adjoint bookkeeping is recorded.
    pub fn eval() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
            consumed: Cell::new(false),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Register a gradient-tracked input (no-op tracking on eval tapes).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, self.grad_enabled, None)
    }

    /// Register an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    pub(crate) fn push(&self, value: Tensor, requires_grad: bool, back: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad: requires_grad && self.grad_enabled,
            back: if self.grad_enabled { back } else { None },
        });
        Var(nodes.len() - 1)
    }

    /// Clone of the value at `v` (cheap: storage is shared).
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Reverse-replay the tape from a scalar loss.
    ///
    /// Errors if the loss is not scalar, if it does not depend on any
    /// gradient-tracked leaf, or if this tape has already been replayed.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        {
            let ln = &nodes[loss.0];
            if ln.value.len() != 1 {
                return Err(TensorError::NotScalar {
                    op: "backward",
                    shape: ln.value.shape().to_vec(),
                });
            }
            if !ln.requires_grad {
                return Err(TensorError::DetachedGraph);
            }
        }
        if self.consumed.replace(true) {
            return Err(TensorError::TapeConsumed);
        }

        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(Tensor::new(nodes[loss.0].value.shape().to_vec(), vec![1.0]).unwrap());

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &nodes[i];
            if let Some(back) = &node.back {
                let g = grads[i].take().unwrap();
                let mut sink = |parent: usize, contribution: Tensor| {
                    accumulate(&mut grads[parent], contribution);
                };
                back(&g, &mut sink);
            }
            // Leaves keep their gradient for collection below.
        }

        Ok(Gradients { grads })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        None => *slot = Some(contribution),
        Some(t) => t.add_assign(&contribution),
    }
}

/// Gradient map produced by [`Tape::backward`], keyed by leaf [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or a zero tensor of the given shape when `v` was
    /// never reached by the backward sweep.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}
