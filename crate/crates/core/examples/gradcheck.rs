//! Compare tape gradients with central differences for a few ops and a
//! small composite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tata::tensor::{grad_check, grad_check_many, Tensor, DEFAULT_STEP};
use tata::Result;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn([4, 5], 1.0, &mut rng);
    let w = Tensor::randn([5, 3], 1.0, &mut rng);

    let softmax = grad_check(|_, v| v.softmax(1)?.ln()?.sum(), &x, DEFAULT_STEP)?;
    let gelu = grad_check(|_, v| v.gelu()?.mul(&v)?.mean(), &x, DEFAULT_STEP)?;
    let mlp = grad_check_many(
        |_, v| v[0].matmul(&v[1])?.relu()?.exp()?.sum(),
        &[x.clone(), w.clone()],
        DEFAULT_STEP,
    )?;
    let norm = grad_check(|_, v| v.l2_norm_last()?.sum(), &x, DEFAULT_STEP)?;

    println!("max relative error");
    for (name, err) in [("log-softmax", softmax), ("gelu*x", gelu), ("relu(xW) exp", mlp), ("row norms", norm)] {
        println!("  {name:<14} {err:.2e}");
    }
    Ok(())
}
