//! Central-difference gradient verification.

use super::{Module, Result, Tape, Tensor, TensorError, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn finite<E: From<TensorError>>(v: f64) -> Result<f64, E> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TensorError::NonFinite { op: "grad_check" }.into())
    }
}

/// Max relative error between the tape gradient of scalar `f` at `x` and
/// central differences with step `h`.
pub fn grad_check<F, E>(f: F, x: &Tensor, h: f64) -> Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F, E>(f: F, xs: &[Tensor], h: f64) -> Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.var(x.clone())).collect();
        let loss = f(&tape, &vars)?;
        finite(loss.item())?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .map(|v| grads.get(*v).unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    };
    let eval = |inputs: &[Tensor]| -> Result<f64, E> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        finite(f(&tape, &vars)?.item())
    };
    let mut worst: f64 = 0.0;
    let mut work = xs.to_vec();
    for (i, x) in xs.iter().enumerate() {
        for j in 0..x.len() {
            let orig = x.data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    Ok(worst)
}

/// Gradient check with respect to every trainable parameter of `module`.
///
/// `stride` > 1 checks every `stride`-th coordinate of each parameter
/// (always including the first), which keeps large models tractable.
pub fn grad_check_params<M, F, E>(module: &mut M, f: F, h: f64, stride: usize) -> Result<f64, E>
where
    M: Module,
    F: for<'t> Fn(&'t Tape, &M) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let stride = stride.max(1);
    let analytic: Vec<Option<Vec<f64>>> = {
        let tape = Tape::new();
        let loss = f(&tape, module)?;
        finite(loss.item())?;
        let grads = tape.backward(loss)?;
        let mut out = Vec::new();
        module.visit_params("", &mut |_, p| {
            out.push(if p.is_frozen() {
                None
            } else {
                Some(
                    grads
                        .for_param(p)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; p.value().len()]),
                )
            })
        });
        out
    };
    let mut worst: f64 = 0.0;
    for (pi, a) in analytic.iter().enumerate() {
        let Some(a) = a else { continue };
        for j in (0..a.len()).step_by(stride) {
            nudge(module, pi, j, h);
            let up = {
                let tape = Tape::new();
                finite(f(&tape, module)?.item())?
            };
            nudge(module, pi, j, -2.0 * h);
            let down = {
                let tape = Tape::new();
                finite(f(&tape, module)?.item())?
            };
            nudge(module, pi, j, h);
            worst = worst.max(rel_err(a[j], (up - down) / (2.0 * h)));
        }
    }
    Ok(worst)
}

fn nudge<M: Module>(module: &mut M, param: usize, coord: usize, delta: f64) {
    let mut k = 0;
    module.visit_params_mut("", &mut |_, p| {
        if k == param {
            p.value_mut().data_mut()[coord] += delta;
        }
        k += 1;
    });
}
