use crate::diff::Var;
use crate::error::Result;
use crate::inversion::PsiSolver;
use crate::lddmm::GaussianKernel;
use crate::regnets::{phi_forward_var, NetVars, RegNet};
use crate::tensor::Tensor;

/// The registration map `Φ` used inside a stage.
pub trait RegistrationMap {
    /// Returns the prediction `f = Φ(t, g)` and, when the map has one, the
    /// momentum behind it.
    fn register(&self, t: &Var, g: &Var) -> Result<(Var, Option<Var>)>;
}

/// `Φ = Γ(Λ(t, g), g)` with the given parameter variables.
pub struct LearnedPhi<'a> {
    pub net: &'a RegNet,
    pub kernel: &'a GaussianKernel,
    pub theta1: &'a NetVars,
    pub theta2: &'a NetVars,
}

impl RegistrationMap for LearnedPhi<'_> {
    fn register(&self, t: &Var, g: &Var) -> Result<(Var, Option<Var>)> {
        let (f, m) = phi_forward_var(t, g, self.net, self.kernel, self.theta1, self.theta2)?;
        Ok((f, Some(m)))
    }
}

/// `Φ(t) = t`.
pub struct Passthrough;

impl RegistrationMap for Passthrough {
    fn register(&self, t: &Var, _: &Var) -> Result<(Var, Option<Var>)> {
        Ok((t.clone(), None))
    }
}

/// Proximal map of `x ↦ κ/2 ‖x − z‖²` with step `1/ρ`:
/// `Φ(t) = (κ z + ρ t) / (κ + ρ)`.
pub struct QuadraticProx {
    pub z: Tensor,
    pub kappa: f64,
    pub rho: f64,
}

impl RegistrationMap for QuadraticProx {
    fn register(&self, t: &Var, _: &Var) -> Result<(Var, Option<Var>)> {
        let s = 1.0 / (self.kappa + self.rho);
        let anchor = Var::constant(self.z.scale(self.kappa * s));
        Ok((t.scale(self.rho * s).add(&anchor)?, None))
    }
}

/// Douglas-Rachford state after stage `k`.
#[derive(Clone, Debug)]
pub struct DRState {
    pub k: usize,
    /// Iterate `tᵏ`.
    pub t: Var,
    /// `bᵏ⁻¹ = tᵏ⁻¹ − fᵏ⁻¹`.
    pub b: Var,
    /// Data-consistent reconstruction `uᵏ`.
    pub u: Var,
    /// Registration prediction.
    pub f: Var,
    pub m: Option<Var>,
}

impl DRState {
    /// Stage-0 state: `t⁰ = u⁰ = f⁰ = t0`, `b = 0`.
    pub fn initial(t0: Var) -> Self {
        let b = Var::constant(Tensor::zeros(t0.shape()));
        DRState {
            k: 0,
            t: t0.clone(),
            b,
            u: t0.clone(),
            f: t0,
            m: None,
        }
    }
}

/// One unrolled iteration:
/// `f = Φ(t)`, `u = Ψ(2f − t, y, ρ)`, `b = t − f`, `t⁺ = b + u`.
pub fn stage_forward(
    state: &DRState,
    g: &Var,
    y: &Var,
    phi: &dyn RegistrationMap,
    psi: &PsiSolver,
    rho: &Var,
) -> Result<DRState> {
    let (f, m) = phi.register(&state.t, g)?;
    let reflected = f.scale(2.0).sub(&state.t)?;
    let u = psi.apply(&reflected, y, rho)?;
    let b = state.t.sub(&f)?;
    let t = b.add(&u)?;
    Ok(DRState {
        k: state.k + 1,
        t,
        b,
        u,
        f,
        m,
    })
}
