//! The inversion block and classical TV reconstruction.

mod cg;
mod psi;
mod tv;

pub use cg::{conjugate_gradient, CgConfig, CgDiagnostics};
pub use psi::{psi_backward, psi_forward, PsiGrads, PsiOp, PsiSolver, RhoParam, SolveMethod, RHO_CAP, RHO_SLOPE};
pub use tv::{total_variation, tv_objective, tv_reconstruct, tv_reconstruct_traced, TvConfig, TvTrace};
