//! Unrolled Douglas-Rachford stages with a known proximal map: iterating
//! the stage converges to the minimiser of ½‖Au − y‖² + κ/2 ‖u − z‖².

use std::sync::Arc;

use sofpidr::inversion::PsiSolver;
use sofpidr::operators::{make_mask, ForwardOperator, MaskPattern};
use sofpidr::pipeline::{stage_forward, DRState, QuadraticProx};
use sofpidr::{Result, Tensor, Var};

fn main() -> Result<()> {
    let (h, w) = (8, 8);
    let (rho, kappa) = (0.6, 0.5);
    let op = Arc::new(ForwardOperator::masked_fourier(make_mask(MaskPattern::Random2d, 0.5, 2, 3, h, w)?, false));
    let u_true = Tensor::from_fn(&[h, w], |i| ((i * 7) % 5) as f64 / 5.0);
    let z = Tensor::from_fn(&[h, w], |i| ((i * 3) % 4) as f64 / 4.0);
    let y = op.apply(&u_true)?;

    // Closed-form minimiser: (AᵀA + κI)⁻¹(Aᵀy + κz).
    let psi = PsiSolver::new(op.clone());
    let (minimiser, _) = psi.forward(&z, &y, kappa)?;

    let map = QuadraticProx { z, kappa, rho };
    let (g, yv, r) = (Var::constant(Tensor::zeros(&[h, w])), Var::constant(y), Var::constant(Tensor::scalar(rho)));
    let mut state = DRState::initial(Var::constant(op.adjoint(yv.value())?));
    for k in 1..=60 {
        state = stage_forward(&state, &g, &yv, &map, &psi, &r)?;
        if k % 10 == 0 {
            println!("stage {k:>3}: |u − u*|∞ = {:.3e}", state.u.value().max_abs_diff(&minimiser)?);
        }
    }
    Ok(())
}
