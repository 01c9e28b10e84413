//! Small parameterized layers shared by the encoder and the classifier head.

use rand::Rng;

use crate::tensor::{param::join, Module, Parameter, Result, Tape, Tensor, Var};

/// `y = x W + b` with `W: [in×out]`, applied to the last axis of any-rank input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = 1.0 / (input as f64).sqrt();
        Self {
            weight: Parameter::new(Tensor::randn([input, output], std, rng)),
            bias: Parameter::new(Tensor::zeros([output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: &Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let inner = *shape.last().unwrap_or(&1);
        let rows = x.value().len() / inner.max(1);
        let flat = if shape.len() == 2 { *x } else { x.reshape([rows, inner])? };
        let y = flat
            .matmul(&tape.param(&self.weight))?
            .add_row(&tape.param(&self.bias))?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape[..shape.len() - 1].to_vec();
            out.push(self.output_dim());
            y.reshape(out)
        }
    }
}

impl Module for Linear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub bias: Parameter,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(dim: usize) -> Self {
        Self {
            gain: Parameter::new(Tensor::ones([dim])),
            bias: Parameter::new(Tensor::zeros([dim])),
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: &Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&tape.param(&self.gain), &tape.param(&self.bias), self.eps)
    }
}

impl Module for LayerNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_applies_to_rank3() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(4, 3, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(Tensor::randn([2, 5, 4], 1.0, &mut rng));
        let y = lin.forward(&tape, &x).unwrap();
        assert_eq!(y.shape(), vec![2, 5, 3]);
    }

    #[test]
    fn linear_and_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([3, 4], 1.0, &mut rng);
        let mut lin = Linear::new(4, 4, &mut rng);
        let err = grad_check_params(
            &mut lin,
            |tape, m| m.forward(tape, &tape.constant(x.clone()))?.gelu()?.sum(),
            1e-5,
            1,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let mut ln = LayerNorm::new(4);
        let w = Tensor::randn([3, 4], 1.0, &mut rng);
        let err = grad_check_params(
            &mut ln,
            |tape, m| m.forward(tape, &tape.constant(x.clone()))?.dot(&tape.constant(w.clone())),
            1e-5,
            1,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
