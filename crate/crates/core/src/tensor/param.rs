use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a [`Parameter`]; used to route tape gradients back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        Self(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable tensor with its gradient buffer.
///
/// Cloning yields a parameter with a new identity, so two copies of one
/// layer can be bound on the same tape without their gradients mixing.
#[derive(Debug)]
pub struct Parameter {
    id: ParamId,
    value: Tensor,
    grad: Tensor,
    frozen: bool,
}

impl Clone for Parameter {
    fn clone(&self) -> Self {
        Self {
            id: ParamId::fresh(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            frozen: self.frozen,
        }
    }
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Self {
            id: ParamId::fresh(),
            value,
            grad,
            frozen: false,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor {
        &mut self.grad
    }

    /// Frozen parameters are bound as constants and skipped by optimizers.
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn requires_grad(&self) -> bool {
        !self.frozen
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        for (a, b) in self.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }
}

/// Anything that owns named parameters.
pub trait Module {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter));

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.value().len());
        n
    }

    fn freeze(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.set_frozen(true));
    }

    /// Order-sensitive checksum of every parameter value.
    fn param_checksum(&self) -> u64 {
        let mut h: u64 = 0;
        self.visit_params("", &mut |_, p| {
            h = h.rotate_left(7) ^ p.value().checksum();
        });
        h
    }

    /// `(name, value)` snapshot of all parameters in visit order.
    fn named_values(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, p| out.push((name.to_string(), p.value().clone())));
        out
    }
}

/// Joins a parameter path segment onto a prefix.
pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
