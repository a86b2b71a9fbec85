//! The data-consistency block Ψ(v, y, ρ) = (AᵀA + ρI)⁻¹(Aᵀy + ρv), its
//! closed form for A = I and its gradients through the graph.

use std::sync::Arc;

use sofpidr::inversion::{psi_forward, PsiSolver, RhoParam, RHO_CAP};
use sofpidr::operators::{make_mask, ForwardOperator, MaskPattern};
use sofpidr::{Result, Tensor, Var};

fn main() -> Result<()> {
    let (h, w) = (16, 16);
    let v = Tensor::from_fn(&[h, w], |i| ((i * 37) % 11) as f64 / 11.0);
    let u = Tensor::from_fn(&[h, w], |i| ((i * 13) % 7) as f64 / 7.0);

    let id = Arc::new(ForwardOperator::identity(h, w));
    let rho = RhoParam::from_rho(0.5, RHO_CAP)?;
    let (x, _) = psi_forward(&v, &u, &rho, id, &Default::default())?;
    let closed = u.add(&v.scale(0.5))?.scale(1.0 / 1.5);
    println!("identity: |Ψ − (y + ρv)/(1 + ρ)|∞ = {:.1e}", x.max_abs_diff(&closed)?);

    let mask = make_mask(MaskPattern::Radial, 0.25, 4, 0, h, w)?;
    let op = Arc::new(ForwardOperator::masked_fourier(mask, false));
    let y = op.apply(&u)?;
    let solver = PsiSolver::new(op.clone());
    for r in [0.1, 0.4, 0.79] {
        let (x, diag) = solver.forward(&v, &y, r)?;
        let fit = op.apply(&x)?.sub(&y)?.norm();
        println!("ρ = {r:.2}: ‖AΨ − y‖ = {fit:.4}, ‖Ψ − v‖ = {:.4}, converged {}", x.sub(&v)?.norm(), diag.converged);
    }

    let (vv, yv, wv) = (Var::leaf(v.clone()), Var::leaf(y), Var::leaf(Tensor::scalar(0.0)));
    let out = solver.apply(&vv, &yv, &RhoParam::realize(&wv, RHO_CAP))?;
    let grads = out.sq_norm().backward()?;
    println!("d‖Ψ‖²/dw = {:.6}", grads.get_or_zeros(&wv).item());
    println!("‖d‖Ψ‖²/dv‖ = {:.6}", grads.get_or_zeros(&vv).norm());
    Ok(())
}
