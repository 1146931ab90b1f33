//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends its output to the tape together with a backward
//! rule. Because an operation can only consume values that already exist,
//! the tape is topologically ordered by construction and a single reverse
//! sweep propagates gradients. A tape supports exactly one backward pass.

mod conv;
mod norm;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use conv::conv_output_extent;
pub use norm::RunningStats;

/// Backward rule of one recorded operation.
///
/// Receives the gradient of the output and a mask of which inputs need a
/// gradient; returns one entry per input.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

/// Role of a trainable tensor, used by the optimizer for weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

/// A trainable leaf tensor with an accumulating gradient buffer.
pub struct Parameter<T> {
    name: String,
    kind: ParamKind,
    value: RefCell<Tensor<T>>,
    grad: RefCell<Option<Tensor<T>>>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Rc<Self> {
        Rc::new(Parameter {
            name: name.into(),
            kind,
            value: RefCell::new(value),
            grad: RefCell::new(None),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn value(&self) -> Ref<'_, Tensor<T>> {
        self.value.borrow()
    }

    pub fn set_value(&self, value: Tensor<T>) -> Result<()> {
        let mut slot = self.value.borrow_mut();
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Mutable access for in-place optimizer updates.
    pub fn update(&self, f: impl FnOnce(&mut Tensor<T>)) {
        f(&mut self.value.borrow_mut());
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.grad.borrow_mut() = None;
    }

    fn accumulate(&self, g: Option<&Tensor<T>>) -> Result<()> {
        let mut slot = self.grad.borrow_mut();
        let shape = self.value.borrow().shape().to_vec();
        let buf = slot.get_or_insert_with(|| Tensor::zeros(&shape));
        if let Some(g) = g {
            buf.add_assign(g)?;
        }
        Ok(())
    }
}

impl<T> fmt::Debug for Parameter<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Parameter")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .finish_non_exhaustive()
    }
}

struct Node<T> {
    op: &'static str,
    value: Rc<Tensor<T>>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
    param: Option<Rc<Parameter<T>>>,
}

/// Recording of a forward computation.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<Vec<Option<Tensor<T>>>>,
    recording: bool,
    consumed: Cell<bool>,
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
            leaf_grads: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
        }
    }

    /// A tape that evaluates values but records no backward rules.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
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
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            op: "constant",
            value: Rc::new(value),
            inputs: Vec::new(),
            requires_grad: false,
            backward: None,
            param: None,
        })
    }

    /// A leaf whose gradient is kept on the tape and read with [`Tape::grad`].
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            op: "variable",
            value: Rc::new(value),
            inputs: Vec::new(),
            requires_grad: self.recording,
            backward: None,
            param: None,
        })
    }

    /// A leaf bound to a parameter; backward adds into the parameter's buffer.
    pub fn param(&self, param: &Rc<Parameter<T>>) -> Var<'_, T> {
        self.push(Node {
            op: "param",
            value: Rc::new(param.value().clone()),
            inputs: Vec::new(),
            requires_grad: self.recording,
            backward: None,
            param: self.recording.then(|| Rc::clone(param)),
        })
    }

    /// Appends the result of an operation.
    ///
    /// `backward` is only invoked (and only built) when the tape records and
    /// at least one input requires a gradient. The output must be finite.
    pub fn record<'t>(
        &'t self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[Var<'t, T>],
        backward: impl FnOnce() -> BackwardFn<T>,
    ) -> Result<Var<'t, T>> {
        value.ensure_finite(op)?;
        for v in inputs {
            if !std::ptr::eq(v.tape, self) {
                return Err(Error::InvalidShape(format!(
                    "{op}: operands belong to different tapes"
                )));
            }
        }
        let requires_grad = self.recording && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        Ok(self.push(Node {
            op,
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            backward: requires_grad.then(backward),
            param: None,
        }))
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Propagates d(loss)/d(node) back to every leaf.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = loss.shape();
        if crate::tensor::numel_of(&loss_shape) != 1 {
            return Err(Error::NonScalarLoss { shape: loss_shape });
        }
        self.consumed.set(true);

        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::ones(&loss_shape));
        }

        for id in (0..=loss.id).rev() {
            let Some(grad_out) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match &node.backward {
                Some(rule) => {
                    let needs: Vec<bool> = node
                        .inputs
                        .iter()
                        .map(|&i| nodes[i].requires_grad)
                        .collect();
                    let input_grads = rule(&grad_out, &needs)?;
                    for ((&input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                        let Some(g) = g else { continue };
                        if !need {
                            continue;
                        }
                        g.ensure_finite(node.op)?;
                        match &mut grads[input] {
                            Some(acc) => acc.add_assign(&g)?,
                            slot => *slot = Some(g),
                        }
                    }
                }
                // leaf: keep the gradient
                None => grads[id] = Some(grad_out),
            }
        }

        for node in nodes.iter_mut() {
            node.backward = None;
        }
        for (node, g) in nodes.iter().zip(&grads) {
            if let Some(p) = &node.param {
                p.accumulate(g.as_ref())?;
            }
        }
        *self.leaf_grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of a tracked leaf after [`Tape::backward`]; zero if the leaf
    /// did not influence the loss. `None` before backward or for untracked
    /// values.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        if !self.consumed.get() || !self.requires_grad_of(var.id) {
            return None;
        }
        let nodes = self.nodes.borrow();
        if nodes[var.id].backward.is_some() || !nodes[var.id].inputs.is_empty() {
            return None;
        }
        let grads = self.leaf_grads.borrow();
        Some(
            grads
                .get(var.id)
                .cloned()
                .flatten()
                .unwrap_or_else(|| Tensor::zeros(nodes[var.id].value.shape())),
        )
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad_of(self.id)
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }
}
