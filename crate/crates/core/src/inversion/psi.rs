//! The data-consistency block `Ψ(v, y, ρ) = (AᵀA + ρI)⁻¹(Aᵀy + ρv)`.
//!
//! Forward and backward both reduce to shifted normal-equation solves.
//! With `s = (AᵀA + ρI)⁻¹ ḡ` for an upstream gradient `ḡ`:
//!
//! * `∂/∂v = ρ s`
//! * `∂/∂y = A s`
//! * `∂/∂ρ = ⟨v − Ψ, s⟩`
//!
//! The solver never enters the differentiation graph; [`PsiOp`] injects
//! these rules as a [`CustomGradOp`].

use std::cell::Cell;
use std::sync::Arc;

use crate::diff::{CustomGradOp, Var};
use crate::error::{Error, Result};
use crate::operators::ForwardOperator;
use crate::tensor::Tensor;

use super::cg::{conjugate_gradient, CgConfig, CgDiagnostics};

/// Default cap on the realised penalty.
pub const RHO_CAP: f64 = 0.8;
/// Slope applied to the raw parameter inside the sigmoid.
pub const RHO_SLOPE: f64 = 0.4;

/// Learnable penalty, realised as `ρ = c · sigmoid(0.4 w) ∈ (0, c)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RhoParam {
    pub w: f64,
    pub c: f64,
}

impl Default for RhoParam {
    fn default() -> Self {
        RhoParam { w: 0.0, c: RHO_CAP }
    }
}

impl RhoParam {
    pub fn rho(&self) -> f64 {
        self.c * crate::diff::sigmoid_fn(RHO_SLOPE * self.w)
    }

    /// The raw parameter realising `rho` under cap `c`.
    pub fn from_rho(rho: f64, c: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < c) {
            return Err(Error::config(format!("rho {rho} outside (0, {c})")));
        }
        let p = rho / c;
        Ok(RhoParam {
            w: (p / (1.0 - p)).ln() / RHO_SLOPE,
            c,
        })
    }

    /// `dρ/dw`.
    pub fn drho_dw(&self) -> f64 {
        let s = crate::diff::sigmoid_fn(RHO_SLOPE * self.w);
        self.c * RHO_SLOPE * s * (1.0 - s)
    }

    /// `ρ` as a graph node of the raw-parameter variable `w` (shape `[1]`).
    pub fn realize(w: &Var, c: f64) -> Var {
        w.scale(RHO_SLOPE).sigmoid().scale(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMethod {
    /// Conjugate gradient on the shifted normal equations.
    Cg,
    /// Exact frequency-domain solve for masked Fourier operators, CG otherwise.
    Auto,
}

/// Operator plus solver settings for `Ψ`.
#[derive(Clone, Debug)]
pub struct PsiSolver {
    pub op: Arc<ForwardOperator>,
    pub cg: CgConfig,
    pub method: SolveMethod,
}

/// Gradients of a scalar `f(Ψ(v, y, ρ))`.
#[derive(Clone, Debug)]
pub struct PsiGrads {
    pub grad_v: Tensor,
    pub grad_y: Tensor,
    pub grad_rho: f64,
}

impl PsiGrads {
    /// Chains `∂f/∂ρ` to the raw parameter.
    pub fn grad_w(&self, rho: &RhoParam) -> f64 {
        self.grad_rho * rho.drho_dw()
    }
}

impl PsiSolver {
    pub fn new(op: Arc<ForwardOperator>) -> Self {
        PsiSolver {
            op,
            cg: CgConfig::default(),
            method: SolveMethod::Auto,
        }
    }

    pub fn with_method(mut self, method: SolveMethod) -> Self {
        self.method = method;
        self
    }

    /// `(AᵀA + ρI)⁻¹ b`.
    pub fn solve_shifted(&self, b: &Tensor, rho: f64) -> Result<(Tensor, CgDiagnostics)> {
        if !(rho > 0.0) {
            return Err(Error::config(format!("rho must be positive, got {rho}")));
        }
        b.expect_shape(&self.op.domain_shape(), "psi solve")?;
        if self.method == SolveMethod::Auto {
            if let Some(f) = self.op.fourier() {
                return Ok((f.solve_shifted(b, rho)?, CgDiagnostics { iterations: 0, rel_residual: 0.0, converged: true }));
            }
            if self.op.kind() == crate::operators::OperatorKind::Identity {
                return Ok((b.scale(1.0 / (1.0 + rho)), CgDiagnostics { iterations: 0, rel_residual: 0.0, converged: true }));
            }
        }
        conjugate_gradient(
            |p| {
                let mut out = self.op.normal(p)?;
                out.axpy(rho, p)?;
                Ok(out)
            },
            b,
            &self.cg,
        )
    }

    pub fn forward(&self, v: &Tensor, y: &Tensor, rho: f64) -> Result<(Tensor, CgDiagnostics)> {
        v.expect_shape(&self.op.domain_shape(), "psi v")?;
        let mut rhs = self.op.adjoint(y)?;
        rhs.axpy(rho, v)?;
        self.solve_shifted(&rhs, rho)
    }

    pub fn backward(&self, upstream: &Tensor, v: &Tensor, y: &Tensor, rho: f64, psi_out: &Tensor) -> Result<PsiGrads> {
        y.expect_shape(&self.op.range_shape(), "psi y")?;
        let (s, _) = self.solve_shifted(upstream, rho)?;
        Ok(PsiGrads {
            grad_v: s.scale(rho),
            grad_y: self.op.apply(&s)?,
            grad_rho: v.sub(psi_out)?.dot(&s)?,
        })
    }

    /// `Ψ` as a differentiable node with inputs `(v, y, ρ)`.
    pub fn apply(&self, v: &Var, y: &Var, rho: &Var) -> Result<Var> {
        Var::apply(
            std::rc::Rc::new(PsiOp {
                solver: self.clone(),
                last: Cell::new(CgDiagnostics::default()),
            }),
            &[v, y, rho],
        )
    }
}

/// [`CustomGradOp`] wrapper around a [`PsiSolver`].
pub struct PsiOp {
    solver: PsiSolver,
    last: Cell<CgDiagnostics>,
}

impl CustomGradOp for PsiOp {
    fn name(&self) -> &'static str {
        "psi"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (out, diag) = self.solver.forward(inputs[0], inputs[1], inputs[2].item())?;
        self.last.set(diag);
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = self
            .solver
            .backward(upstream, inputs[0], inputs[1], inputs[2].item(), output)?;
        Ok(vec![Some(g.grad_v), Some(g.grad_y), Some(Tensor::scalar(g.grad_rho))])
    }
}

/// Free-function form of the forward solve.
pub fn psi_forward(v: &Tensor, y: &Tensor, rho: &RhoParam, op: Arc<ForwardOperator>, cfg: &CgConfig) -> Result<(Tensor, CgDiagnostics)> {
    let mut s = PsiSolver::new(op).with_method(SolveMethod::Cg);
    s.cg = *cfg;
    s.forward(v, y, rho.rho())
}

/// Free-function form of the backward rule; `grad_rho` is w.r.t. `ρ`, use
/// [`PsiGrads::grad_w`] for the raw parameter.
pub fn psi_backward(
    upstream: &Tensor,
    v: &Tensor,
    y: &Tensor,
    rho: &RhoParam,
    psi_out: &Tensor,
    op: Arc<ForwardOperator>,
    cfg: &CgConfig,
) -> Result<PsiGrads> {
    let mut s = PsiSolver::new(op).with_method(SolveMethod::Cg);
    s.cg = *cfg;
    s.backward(upstream, v, y, rho.rho(), psi_out)
}
