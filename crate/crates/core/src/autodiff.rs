//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation appends a node holding its output value and
//! a closure mapping the output gradient to input gradients. [`Var::backward`]
//! walks the tape once in reverse execution order, accumulating gradients for
//! nodes reachable from the loss.
//!
//! Nodes created with [`Tape::constant`] are untracked: they never receive a
//! gradient, and operations whose inputs are all untracked record no backward
//! closure at all. Inference therefore runs on the same code path at no extra
//! cost.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Maps the output gradient to one optional gradient per input, in the order
/// the inputs were recorded.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    tracked: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Ordered record of executed operations. Node ids are execution order.
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
        Self { nodes: RefCell::new(Vec::new()) }
    }

    /// A leaf that receives a gradient (a learnable parameter or checked input).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node { value: Rc::new(value), tracked: true, inputs: vec![], backward: None })
    }

    /// A leaf that never accumulates gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node { value: Rc::new(value), tracked: false, inputs: vec![], backward: None })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Appends an operation result. The closure is dropped when no input is
    /// tracked.
    pub(crate) fn record<'t>(
        &'t self,
        value: Tensor<T>,
        inputs: &[Var<'t, T>],
        backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'t, T> {
        debug_assert!(inputs.iter().all(|v| std::ptr::eq(v.tape, self)));
        let tracked = inputs.iter().any(|v| v.tracked());
        let node = if tracked {
            Node {
                value: Rc::new(value),
                tracked: true,
                inputs: inputs.iter().map(|v| v.id).collect(),
                backward: Some(Box::new(backward)),
            }
        } else {
            Node { value: Rc::new(value), tracked: false, inputs: vec![], backward: None }
        };
        self.push(node)
    }

    fn backward_from(&self, root: usize) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root];
        if !root_node.tracked {
            return Err(Error::Usage("backward called on a detached tensor".into()));
        }
        if root_node.value.numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got shape {:?}", root_node.value.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(root_node.value.shape().to_vec(), T::one()));

        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].as_ref() else { continue };
            let input_grads = backward(g);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (&input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !nodes[input].tracked {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    /// Reverse pass from this scalar.
    pub fn backward(&self) -> Result<Gradients<T>> {
        self.tape.backward_from(self.id)
    }
}

/// Gradients indexed by node id.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }

    /// Gradient of `var`, or zeros of its shape when it was unreachable.
    pub fn get_or_zeros(&self, var: &Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
