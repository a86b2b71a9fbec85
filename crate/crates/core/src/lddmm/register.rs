use crate::diff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::kernel::GaussianKernel;
use super::shoot::{epdiff_shoot, epdiff_shoot_var, IntegratorConfig};
use super::warp::{warp_var, Boundary};

/// Weights of the classical variational model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariationalWeights {
    /// Data-fidelity weight of `‖Au − y‖²`.
    pub lambda: f64,
    /// Registration-fidelity scale: the image mismatch is weighted by `1/σ²`.
    pub sigma_reg: f64,
    /// Coupling weight.
    pub mu: f64,
}

impl Default for VariationalWeights {
    fn default() -> Self {
        VariationalWeights {
            lambda: 1.0,
            sigma_reg: 0.1,
            mu: 1.0,
        }
    }
}

impl VariationalWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.sigma_reg > 0.0 && self.mu > 0.0) {
            return Err(Error::config(format!("weights must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn data_weight(&self) -> f64 {
        1.0 / (self.sigma_reg * self.sigma_reg)
    }
}

/// Optimiser budget for [`lddmm_register`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegisterOptions {
    pub max_iters: usize,
    /// Stop once the relative energy decrease stays below this for
    /// [`RegisterOptions::patience`] accepted steps.
    pub rel_tolerance: f64,
    pub patience: usize,
    /// Halvings allowed per line search.
    pub max_backtracks: usize,
}

impl Default for RegisterOptions {
    fn default() -> Self {
        RegisterOptions {
            max_iters: 200,
            rel_tolerance: 1e-5,
            patience: 3,
            max_backtracks: 20,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Registration {
    /// Optimised initial momentum `m(x, 0)`.
    pub momentum: Tensor,
    /// `φ(1)`.
    pub phi: Tensor,
    /// `φ⁻¹(1)`.
    pub phi_inv: Tensor,
    /// Energy at the start and after every accepted step.
    pub energies: Vec<f64>,
    /// `‖f∘φ⁻¹ − g‖²` at the start and at the end.
    pub initial_ssd: f64,
    pub final_ssd: f64,
    pub iterations: usize,
    /// Set when a line search exhausted its halvings.
    pub line_search_failed: bool,
}

struct Eval {
    energy: f64,
    ssd: f64,
    grad: Option<Tensor>,
}

fn evaluate(
    m: &Tensor,
    f: &Var,
    g: &Tensor,
    kernel: &GaussianKernel,
    integ: &IntegratorConfig,
    data_weight: f64,
    with_grad: bool,
) -> Result<Eval> {
    let mv = if with_grad { Var::leaf(m.clone()) } else { Var::constant(m.clone()) };
    let shot = epdiff_shoot_var(&mv, kernel, integ, false)?;
    let warped = warp_var(f, &shot.phi_inv, Boundary::Zero)?;
    let resid = warped.sub(&Var::constant(g.clone()))?.sq_norm();
    let reg = kernel.apply_var(&mv)?.mul(&mv)?.sum();
    let gamma = kernel.config().gamma;
    let energy = reg.scale(0.5 * gamma).add(&resid.scale(0.5 * data_weight))?;
    let value = energy.value().item();
    if !value.is_finite() {
        return Err(Error::Blowup("lddmm_register"));
    }
    let grad = if with_grad {
        Some(energy.backward()?.get_or_zeros(&mv))
    } else {
        None
    };
    Ok(Eval {
        energy: value,
        ssd: resid.value().item(),
        grad,
    })
}

/// Registration energy `γ/2 ⟨m, Km⟩ + 1/(2σ²) ‖f∘φ⁻¹(1) − g‖²`.
pub fn registration_energy(
    m: &Tensor,
    f: &Tensor,
    g: &Tensor,
    kernel: &GaussianKernel,
    integ: &IntegratorConfig,
    weights: &VariationalWeights,
) -> Result<f64> {
    let fv = Var::constant(f.clone());
    Ok(evaluate(m, &fv, g, kernel, integ, weights.data_weight(), false)?.energy)
}

/// Geodesic-shooting registration of `f` onto `g` by gradient descent on the
/// initial momentum, with Barzilai-Borwein trial steps and Armijo
/// backtracking. Accepted energies never increase.
pub fn lddmm_register(
    f: &Tensor,
    g: &Tensor,
    weights: &VariationalWeights,
    kernel: &GaussianKernel,
    integ: &IntegratorConfig,
    opts: &RegisterOptions,
) -> Result<Registration> {
    weights.validate()?;
    f.same_shape(g, "lddmm_register")?;
    let (h, w) = kernel.grid();
    f.expect_shape(&[h, w], "lddmm_register")?;
    let dw = weights.data_weight();
    let fv = Var::constant(f.clone());

    let mut m = Tensor::zeros(&[2, h, w]);
    let mut cur = evaluate(&m, &fv, g, kernel, integ, dw, true)?;
    let initial_ssd = cur.ssd;
    let mut energies = vec![cur.energy];
    let mut step: Option<f64> = None;
    let mut prev: Option<(Tensor, Tensor)> = None;
    let mut quiet = 0;
    let mut failed = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iters {
        let grad = cur.grad.clone().ok_or(Error::Blowup("lddmm_register"))?;
        let gg = grad.norm_sq();
        if gg == 0.0 || cur.energy == 0.0 {
            break;
        }
        iterations += 1;
        let mut alpha = match (&prev, step) {
            (Some((dm, dg)), _) => {
                let sy = dm.dot(dg)?;
                if sy > 0.0 {
                    dm.norm_sq() / sy
                } else {
                    step.unwrap_or(1.0) * 2.0
                }
            }
            (None, Some(s)) => s,
            (None, None) => 1.0 / grad.max_abs(),
        };
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let mut trial = m.clone();
            trial.axpy(-alpha, &grad)?;
            match evaluate(&trial, &fv, g, kernel, integ, dw, false) {
                Ok(e) if e.energy <= cur.energy - 1e-4 * alpha * gg => {
                    accepted = Some(trial);
                    break;
                }
                Ok(_) | Err(Error::Blowup(_)) => alpha *= 0.5,
                Err(e) => return Err(e),
            }
        }
        let Some(next) = accepted else {
            failed = true;
            log::warn!("lddmm line search failed after {} halvings", opts.max_backtracks);
            break;
        };
        let next_eval = evaluate(&next, &fv, g, kernel, integ, dw, true)?;
        let next_grad = next_eval.grad.clone().ok_or(Error::Blowup("lddmm_register"))?;
        prev = Some((next.sub(&m)?, next_grad.sub(&grad)?));
        step = Some(alpha);
        let rel = (cur.energy - next_eval.energy) / cur.energy.max(f64::MIN_POSITIVE);
        m = next;
        cur = next_eval;
        energies.push(cur.energy);
        quiet = if rel < opts.rel_tolerance { quiet + 1 } else { 0 };
        if quiet >= opts.patience {
            break;
        }
    }

    let traj = epdiff_shoot(&m, kernel, integ)?;
    Ok(Registration {
        momentum: m,
        phi: traj.phi,
        phi_inv: traj.phi_inv,
        energies,
        initial_ssd,
        final_ssd: cur.ssd,
        iterations,
        line_search_failed: failed,
    })
}
