use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgConfig {
    pub rel_tolerance: f64,
    pub max_iters: usize,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig {
            rel_tolerance: 1e-6,
            max_iters: 50,
        }
    }
}

impl CgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tolerance > 0.0) || self.max_iters == 0 {
            return Err(Error::config(format!("invalid CG settings {self:?}")));
        }
        Ok(())
    }
}

/// Outcome of one solve.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CgDiagnostics {
    pub iterations: usize,
    pub rel_residual: f64,
    pub converged: bool,
}

/// Consecutive residual increases treated as divergence.
const DIVERGENCE_RUN: usize = 5;

/// Solves `M x = b` for symmetric positive definite `M`, starting from zero.
/// Returns the best iterate when the budget runs out.
pub fn conjugate_gradient(
    apply: impl Fn(&Tensor) -> Result<Tensor>,
    b: &Tensor,
    cfg: &CgConfig,
) -> Result<(Tensor, CgDiagnostics)> {
    cfg.validate()?;
    let b_norm = b.norm();
    let mut x = Tensor::zeros(b.shape());
    if b_norm == 0.0 {
        return Ok((
            x,
            CgDiagnostics {
                iterations: 0,
                rel_residual: 0.0,
                converged: true,
            },
        ));
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.norm_sq();
    let mut best = (x.clone(), rr.sqrt() / b_norm);
    let mut rising = 0;
    let mut prev = best.1;
    for it in 1..=cfg.max_iters {
        let mp = apply(&p)?;
        let pmp = p.dot(&mp)?;
        if !(pmp > 0.0) {
            return Err(Error::CgDiverged {
                iters: it,
                residual: prev,
            });
        }
        let alpha = rr / pmp;
        x.axpy(alpha, &p)?;
        r.axpy(-alpha, &mp)?;
        let rr_new = r.norm_sq();
        let rel = rr_new.sqrt() / b_norm;
        if !rel.is_finite() {
            return Err(Error::CgDiverged { iters: it, residual: rel });
        }
        if rel < best.1 {
            best = (x.clone(), rel);
        }
        if rel <= cfg.rel_tolerance {
            return Ok((
                x,
                CgDiagnostics {
                    iterations: it,
                    rel_residual: rel,
                    converged: true,
                },
            ));
        }
        // CG residuals are not monotone; only a sustained rise above the
        // starting residual counts as divergence.
        rising = if rel > prev { rising + 1 } else { 0 };
        if rising >= DIVERGENCE_RUN && rel > 1.0 {
            return Err(Error::CgDiverged { iters: it, residual: rel });
        }
        prev = rel;
        let beta = rr_new / rr;
        rr = rr_new;
        let mut next = r.clone();
        next.axpy(beta, &p)?;
        p = next;
    }
    log::warn!(
        "conjugate gradient stopped at {} iterations with relative residual {:.3e}",
        cfg.max_iters,
        best.1
    );
    Ok((
        best.0,
        CgDiagnostics {
            iterations: cfg.max_iters,
            rel_residual: best.1,
            converged: false,
        },
    ))
}
