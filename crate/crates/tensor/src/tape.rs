//! Reverse-mode differentiation tape.
//!
//! Every operation on a [`Var`] appends a node holding its value, the ids of
//! its inputs and a one-shot closure mapping the upstream gradient to input
//! gradients. Nodes are appended in execution order, so the vector itself is
//! a topological order and [`Tape::backward`] is a single reverse sweep.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Maps the upstream gradient to one optional gradient per input.
pub type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    op: &'static str,
    value: Rc<Tensor<T>>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
    paranoid: bool,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        write!(f, "Var#{}({} {:?})", self.id, n.op, n.value.shape())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// Fresh tape. Non-finite checking is on in debug builds.
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), consumed: Cell::new(false), paranoid: cfg!(debug_assertions) }
    }

    /// Enables or disables the per-op NaN/Inf validation pass.
    pub fn with_paranoid(mut self, on: bool) -> Self {
        self.paranoid = on;
        self
    }

    pub fn is_paranoid(&self) -> bool {
        self.paranoid
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: "leaf", value: Rc::new(value), inputs: Vec::new(), requires_grad, backward: None });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// Records an operation computed outside the built-in op set.
    ///
    /// `backward` receives the gradient of the loss w.r.t. `value` and must
    /// return one entry per input (shape equal to that input, or `None`).
    pub fn custom_op<'t>(
        &'t self,
        op: &'static str,
        inputs: &[Var<'t, T>],
        value: Tensor<T>,
        backward: impl FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var<'t, T>> {
        self.push(op, inputs, Rc::new(value), backward)
    }

    pub(crate) fn push<'t>(
        &'t self,
        op: &'static str,
        inputs: &[Var<'t, T>],
        value: Rc<Tensor<T>>,
        backward: impl FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var<'t, T>> {
        if inputs.iter().any(|v| !std::ptr::eq(v.tape, self)) {
            return Err(TensorError::ForeignVar { op });
        }
        if self.paranoid && !value.all_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.id].requires_grad);
        let backward: Option<BackwardFn<T>> = if requires_grad { Some(Box::new(backward)) } else { None };
        nodes.push(Node { op, value, inputs: inputs.iter().map(|v| v.id).collect(), requires_grad, backward });
        Ok(Var { tape: self, id: nodes.len() - 1 })
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients accumulate additively over fan-out. Every leaf created with
    /// `requires_grad` gets an entry, zero when it does not influence `loss`.
    /// A tape supports exactly one backward pass.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::ForeignVar { op: "backward" });
        }
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        let loss_value = Rc::clone(&nodes[loss.id].value);
        if loss_value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(loss_value.shape().to_vec()));

        for id in (0..=loss.id).rev() {
            if nodes[id].inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let Some(f) = nodes[id].backward.take() else { continue };
            let input_grads = f(&g);
            let inputs = std::mem::take(&mut nodes[id].inputs);
            debug_assert_eq!(input_grads.len(), inputs.len(), "{}: gradient arity", nodes[id].op);
            for (&inp, gi) in inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                if !nodes[inp].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    gi.shape(),
                    nodes[inp].value.shape(),
                    "{}: gradient shape for input from {}",
                    nodes[id].op,
                    nodes[inp].op
                );
                match &mut grads[inp] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }

        let mut leaf_grads = Vec::with_capacity(nodes.len());
        for (id, node) in nodes.iter().enumerate() {
            let g = if node.inputs.is_empty() && node.backward.is_none() && node.requires_grad && node.op == "leaf" {
                Some(grads[id].take().unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec())))
            } else {
                None
            };
            leaf_grads.push(g);
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Gradients of every `requires_grad` leaf after a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Moves the gradient out; zeros of the right shape if absent.
    pub fn take(&mut self, var: Var<'_, T>) -> Tensor<T> {
        self.grads
            .get_mut(var.id)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Single-element value.
    pub fn item(&self) -> T {
        self.value().item()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        let value = self.value();
        let mut nodes = self.tape.nodes.borrow_mut();
        nodes.push(Node { op: "detach", value, inputs: Vec::new(), requires_grad: false, backward: None });
        Var { tape: self.tape, id: nodes.len() - 1 }
    }
}
