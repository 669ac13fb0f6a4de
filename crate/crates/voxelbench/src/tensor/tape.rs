use std::cell::RefCell;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// A value participating in a recorded computation. `node` is set when the
/// value depends on a watched tensor; constants carry `None` and the backward
/// pass skips them.
#[derive(Clone, Debug)]
pub struct Var<T: Scalar> {
    pub value: Tensor<T>,
    pub(crate) node: Option<NodeId>,
}

impl<T: Scalar> Var<T> {
    /// A value outside the gradient graph (inputs, targets, frozen tensors).
    pub fn constant(value: Tensor<T>) -> Self {
        Var { value, node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tracked(&self) -> bool {
        self.node.is_some()
    }
}

type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &mut Grads<T>)>;

struct Node<T: Scalar> {
    backward: Option<BackwardFn<T>>,
    leaf: bool,
}

/// Ordered record of executed operations. Nodes are pushed in execution
/// order, so every operation appears after the producers of its inputs and a
/// single reverse sweep visits each node exactly once. A tape is owned by
/// one training step and is consumed by [`Tape::backward`].
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a tensor whose gradient should be produced by the backward
    /// pass (a trainable parameter or a watched input).
    pub fn watch(&self, value: Tensor<T>) -> Var<T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            backward: None,
            leaf: true,
        });
        Var {
            value,
            node: Some(nodes.len() - 1),
        }
    }

    /// Record an operation output together with its backward rule.
    pub(crate) fn push(&self, backward: BackwardFn<T>) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            backward: Some(backward),
            leaf: false,
        });
        nodes.len() - 1
    }

    /// Reverse sweep from a scalar loss. Consumes the tape and returns the
    /// accumulated gradients for every watched tensor.
    pub fn backward(self, loss: &Var<T>) -> Result<Grads<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", loss.value.shape()),
            ));
        }
        let root = loss.node.ok_or_else(|| {
            Error::invalid("backward", "loss does not depend on any watched tensor")
        })?;
        let mut nodes = self.nodes.into_inner();
        let mut grads = Grads {
            slots: vec![None; nodes.len()],
        };
        grads.slots[root] = Some(Tensor::full(loss.value.shape(), T::one()));
        for id in (0..=root).rev() {
            let node = &mut nodes[id];
            if node.leaf {
                continue;
            }
            // Intermediate gradients are dropped once consumed.
            let Some(grad) = grads.slots[id].take() else {
                continue;
            };
            if let Some(backward) = node.backward.take() {
                backward(&grad, &mut grads);
            }
        }
        Ok(grads)
    }
}

/// Gradients indexed by tape node, produced by [`Tape::backward`].
pub struct Grads<T: Scalar> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Accumulate a contribution into a node's gradient slot.
    pub(crate) fn accumulate(&mut self, id: NodeId, delta: Tensor<T>) {
        match &mut self.slots[id] {
            Some(g) => g.accumulate(&delta).expect("gradient shape"),
            slot @ None => *slot = Some(delta),
        }
    }

    pub fn of(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|id| self.slots[id].as_ref())
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        var.node.and_then(|id| self.slots[id].take())
    }
}
