//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every operation records a backward closure on the output tensor; calling
//! [`Tensor::backward`] on a scalar walks the graph in reverse topological
//! order and accumulates gradients into every tensor that requires them.
//! Broadcasting is restricted to leading axes: a smaller operand must match
//! the trailing dimensions of the larger one exactly.
//!
//! Shape mismatches are programming errors and panic with a message naming
//! the operation and both shapes.

mod check;
mod ops;

pub use check::{grad_check, grad_check_params};

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Context handed to a backward closure: the output's values and incoming
/// gradient, plus the parent tensors to accumulate into.
pub(crate) struct BackwardCtx<'a> {
    pub out_values: &'a [f64],
    pub out_grad: &'a [f64],
    pub parents: &'a [Tensor],
}

type BackwardFn = Box<dyn Fn(&BackwardCtx)>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Shared handle to a tensor node. Cloning is cheap and refers to the same
/// underlying storage. Not thread-safe; a graph lives on one thread.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(
        shape: Vec<usize>,
        values: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        assert_eq!(
            numel(&shape),
            values.len(),
            "tensor construction: shape {:?} does not match {} values",
            shape,
            values.len()
        );
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let requires = parents.iter().any(|p| p.inner.requires_grad);
        if requires {
            Tensor::make(shape, values, true, parents, Some(backward))
        } else {
            // Constant subgraph: no need to keep parents or a backward record.
            Tensor::make(shape, values, false, Vec::new(), None)
        }
    }

    /// Constant tensor; does not participate in gradient computation.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Tensor {
        Tensor::make(shape.to_vec(), values, false, Vec::new(), None)
    }

    /// Trainable leaf tensor: gradients accumulate here.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Tensor {
        Tensor::make(shape.to_vec(), values, true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![0.0; numel(shape)])
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::new(shape, vec![1.0; numel(shape)])
    }

    /// Scalar constant with the empty shape.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(&[], vec![v])
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the current values.
    pub fn values(&self) -> Vec<f64> {
        self.inner.values.borrow().clone()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        let v = self.inner.values.borrow();
        assert_eq!(v.len(), 1, "item: tensor of shape {:?} is not a scalar", self.inner.shape);
        v[0]
    }

    /// Run `f` over a borrowed view of the values without copying.
    pub fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.values.borrow())
    }

    /// Overwrite the stored values in place (used by optimizers and loaders).
    pub fn set_values(&self, new: &[f64]) {
        let mut v = self.inner.values.borrow_mut();
        assert_eq!(
            v.len(),
            new.len(),
            "set_values: expected {} values for shape {:?}, got {}",
            v.len(),
            self.inner.shape,
            new.len()
        );
        v.copy_from_slice(new);
    }

    /// Apply an in-place update to the stored values.
    pub fn update_values(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.values.borrow_mut());
    }

    /// Copy of the accumulated gradient, if any backward pass has reached
    /// this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => {
                *slot = Some(delta.to_vec());
            }
        }
    }

    /// Reverse-mode gradient propagation from a scalar output. Gradients
    /// accumulate (they are not reset) so repeated calls add up; callers
    /// zero parameter gradients between steps.
    pub fn backward(&self) {
        assert_eq!(
            self.len(),
            1,
            "backward: output must be scalar, got shape {:?}",
            self.inner.shape
        );
        self.accumulate_grad(&[1.0]);
        let order = self.topo_order();
        for node in order.iter().rev() {
            let inner = &node.inner;
            let Some(backward) = inner.backward.as_ref() else {
                continue;
            };
            let grad_ref = inner.grad.borrow();
            let Some(out_grad) = grad_ref.as_ref() else {
                continue;
            };
            let out_values = inner.values.borrow();
            let ctx = BackwardCtx {
                out_values: &out_values,
                out_grad,
                parents: &inner.parents,
            };
            backward(&ctx);
        }
    }

    /// Iterative DFS producing a topological order (parents before children).
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        // Stack entries: (node, parents_pushed).
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.inner.id) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.inner.parents {
                if !seen.contains(&p.inner.id) && p.inner.backward.is_some() {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}
