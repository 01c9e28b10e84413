use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::fmt;

use super::ops::Op;
use super::param::{Module, ParamId, Parameter};
use super::{Result, Tensor, TensorError};

pub(super) struct Node {
    pub(super) value: Tensor,
    pub(super) op: Op,
    pub(super) requires_grad: bool,
}

#[derive(Default)]
pub(super) struct Inner {
    pub(super) nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
}

/// Records operations in execution order; parents always precede children.
pub struct Tape {
    pub(super) inner: RefCell<Inner>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.len())
            .field("check_finite", &self.check_finite)
            .finish()
    }
}

impl Tape {
    /// A tape that validates every op output for NaN/Inf.
    pub fn new() -> Self {
        Self::with_finite_checks(true)
    }

    /// A tape without per-op finiteness checks (training fast path).
    pub fn unchecked() -> Self {
        Self::with_finite_checks(false)
    }

    pub fn with_finite_checks(check_finite: bool) -> Self {
        Self {
            inner: RefCell::new(Inner::default()),
            check_finite,
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A constant input: gradients never flow into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, false)
    }

    /// A differentiable input leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Binds a parameter. Frozen parameters become constants. Binding the
    /// same parameter twice returns the same node.
    pub fn param(&self, p: &Parameter) -> Var<'_> {
        if let Some(&id) = self.inner.borrow().params.get(&p.id()) {
            return Var { tape: self, id };
        }
        let v = self.push_raw(p.value().clone(), Op::Leaf, p.requires_grad());
        self.inner.borrow_mut().params.insert(p.id(), v.id);
        v
    }

    fn push_raw(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    pub(super) fn push(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = {
            let inner = self.inner.borrow();
            op.parents().iter().any(|&p| inner.nodes[p].requires_grad)
        };
        Ok(self.push_raw(value, op, requires_grad))
    }

    pub(super) fn nodes(&self) -> Ref<'_, Vec<Node>> {
        Ref::map(self.inner.borrow(), |i| &i.nodes)
    }

    /// Reverse accumulation from a scalar loss.
    ///
    /// The tape itself is not modified, so calling this twice yields
    /// identical gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let inner = self.inner.borrow();
        let nodes = &inner.nodes;
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            if nodes[i].requires_grad {
                nodes[i].op.backward(&nodes[i].value, &g, nodes, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: inner.params.clone(),
        })
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(super) tape: &'t Tape,
    pub(super) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].value.shape().to_vec()
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes()[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes()[self.id].requires_grad
    }

    pub(super) fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes()[self.id].value)
    }
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn get(&self, v: Var<'_>) -> Option<Tensor> {
        let g = self.grads.get(v.id)?.as_ref()?;
        Some(Tensor::new(v.shape(), g.clone()).expect("gradient shape mirrors value"))
    }

    /// Gradient for a bound parameter, if it was bound and received gradient.
    pub fn for_param(&self, p: &Parameter) -> Option<&[f64]> {
        let id = *self.params.get(&p.id())?;
        self.grads[id].as_deref()
    }

    /// Adds these gradients into the `grad` buffers of every trainable
    /// parameter of `module`.
    pub fn accumulate_into<M: Module + ?Sized>(&self, module: &mut M) {
        module.visit_params_mut("", &mut |_, p| {
            if p.is_frozen() {
                return;
            }
            if let Some(&id) = self.params.get(&p.id()) {
                if let Some(g) = &self.grads[id] {
                    p.accumulate_grad(g);
                }
            }
        });
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
