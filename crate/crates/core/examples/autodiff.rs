//! Reverse-mode differentiation: build a small graph, backpropagate and
//! compare against central finite differences.

use sofpidr::diff::{finite_difference, relative_error};
use sofpidr::{Result, Tensor, Var};

fn main() -> Result<()> {
    let x0 = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin());
    let w = Tensor::from_fn(&[3, 4], |i| 1.0 + 0.1 * i as f64);

    // L(x) = ‖σ(x) ⊙ w‖² + mean(x)
    let loss = |x: &Var| -> Result<Var> { x.sigmoid().mul(&Var::constant(w.clone()))?.sq_norm().add(&x.mean()) };

    let x = Var::leaf(x0.clone());
    let l = loss(&x)?;
    let grads = l.backward()?;
    let analytic = grads.get_or_zeros(&x);
    let numeric = finite_difference(|t| Ok(loss(&Var::constant(t.clone()))?.value().item()), &x0, 1e-6)?;

    println!("loss           {:.6}", l.value().item());
    println!("dL/dx          {:?}", &analytic.data()[..4]);
    println!("finite diff    {:?}", &numeric.data()[..4]);
    println!("relative error {:.2e}", relative_error(&analytic, &numeric, 1e-8));
    Ok(())
}
