use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use super::{Array, Float, TensorError};

/// Backward rule of one recorded operation.
pub(crate) trait Op<T: Float> {
    fn inputs(&self) -> Vec<Tensor<T>>;
    /// Receives the gradient of the loss with respect to this operation's
    /// output and accumulates into the inputs.
    fn backward(&self, grad_out: &[T]);
}

struct Node<T: Float> {
    value: RefCell<Array<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    op: RefCell<Option<Box<dyn Op<T>>>>,
}

/// A node of the dynamic differentiation graph.
///
/// Cloning is cheap and shares the node. Operations on tensors that require
/// gradients record their backward rule; [`Tensor::backward`] walks the
/// recorded tape in reverse topological order and releases it.
pub struct Tensor<T: Float = f32>(Rc<Node<T>>);

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self(Rc::clone(&self.0))
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Float> Tensor<T> {
    /// Constant input; gradients are never tracked.
    pub fn constant(value: Array<T>) -> Self {
        Self::leaf(value, false)
    }

    /// Trainable leaf whose gradient is accumulated by `backward`.
    pub fn param(value: Array<T>) -> Self {
        Self::leaf(value, true)
    }

    fn leaf(value: Array<T>, requires_grad: bool) -> Self {
        Self(Rc::new(Node {
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            op: RefCell::new(None),
        }))
    }

    /// Wraps an operation result, recording `op` only if some input tracks
    /// gradients.
    pub(crate) fn from_op(value: Array<T>, op: impl Op<T> + 'static) -> Self {
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        let node = Node {
            value: RefCell::new(value),
            grad: RefCell::new(None),
            requires_grad,
            op: RefCell::new(if requires_grad { Some(Box::new(op)) } else { None }),
        };
        Self(Rc::new(node))
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.value.borrow().numel()
    }

    pub fn value(&self) -> Ref<'_, Array<T>> {
        self.0.value.borrow()
    }

    pub fn data(&self) -> Ref<'_, [T]> {
        Ref::map(self.0.value.borrow(), |a| a.data())
    }

    /// Mutable access to the stored value, for optimizer updates and state
    /// loading. Must not be used on a tensor whose recorded consumers have not
    /// yet run backward.
    pub fn value_mut(&self) -> RefMut<'_, Array<T>> {
        self.0.value.borrow_mut()
    }

    pub fn to_array(&self) -> Array<T> {
        self.0.value.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        let v = self.0.value.borrow();
        debug_assert_eq!(v.numel(), 1);
        v.data()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Accumulates into this tensor's gradient buffer, allocating it on first
    /// use. No-op for tensors that do not track gradients.
    pub(crate) fn accumulate(&self, f: impl FnOnce(&mut [T])) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.numel()]);
        f(buf);
    }

    /// Reverse-mode sweep from a one-element loss. Gradients accumulate into
    /// leaves across calls; the tape is released as it is consumed.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        self.accumulate(|g| g[0] = g[0] + T::one());
        for node in order.iter().rev() {
            let op = node.0.op.borrow_mut().take();
            if let Some(op) = op {
                let grad = node.0.grad.borrow_mut().take();
                if let Some(grad) = grad {
                    op.backward(&grad);
                }
            }
        }
        Ok(())
    }

    /// Post-order over nodes with a recorded op reachable from `self`.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node<T>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(Rc::as_ptr(&t.0)) {
                continue;
            }
            let inputs = match t.0.op.borrow().as_ref() {
                Some(op) => op.inputs(),
                None => continue,
            };
            stack.push((t, true));
            for inp in inputs {
                if inp.requires_grad() && !seen.contains(&Rc::as_ptr(&inp.0)) {
                    stack.push((inp, false));
                }
            }
        }
        order
    }
}
