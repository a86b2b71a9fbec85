//! Self-test battery behind `sofpidr check`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{finite_difference, relative_error, Var};
use crate::error::Result;
use crate::eval::{psnr, ssim};
use crate::inversion::{psi_backward, psi_forward, CgConfig, PsiSolver, RhoParam, RHO_CAP};
use crate::lddmm::{epdiff_shoot, identity_map, warp, warp_var, Boundary, GaussianKernel, IntegratorConfig, KernelConfig};
use crate::operators::{adjoint_mismatch, make_mask, simulate_measurement, ForwardOperator, MaskPattern, NoiseModel, OperatorSpec};
use crate::pipeline::{pipeline_forward, Context, Init, LossConfig, Model, PipelineConfig, StageVars};
use crate::regnets::{GammaArch, LambdaArch};
use crate::tensor::Tensor;

/// Outcome of one self-test.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn tight() -> CgConfig {
    CgConfig {
        rel_tolerance: 1e-12,
        max_iters: 500,
    }
}

fn bound(name: &str, value: Result<f64>, tol: f64) -> CheckResult {
    match value {
        Ok(v) => CheckResult {
            name: name.to_string(),
            passed: v < tol,
            detail: format!("{v:.3e} < {tol:.0e}"),
        },
        Err(e) => CheckResult {
            name: name.to_string(),
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn adjoint_checks(out: &mut Vec<CheckResult>) {
    for pattern in [MaskPattern::Radial, MaskPattern::Random2d, MaskPattern::Random1dCartesian] {
        for rate in [0.2, 0.25, 1.0 / 3.0] {
            let r = make_mask(pattern, rate, 4, 7, 32, 32)
                .and_then(|m| adjoint_mismatch(&ForwardOperator::masked_fourier(m, false), 20, 1));
            out.push(bound(&format!("adjoint masked-fourier {pattern:?} rate {rate:.3}"), r, 1e-10));
        }
    }
    for views in [18, 181] {
        let r = adjoint_mismatch(&ForwardOperator::ray_transform(32, 32, views), 10, 2);
        out.push(bound(&format!("adjoint ray-transform {views} views"), r, 1e-10));
    }
}

fn psi_identity_closed_form() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let op = Arc::new(ForwardOperator::identity(6, 6));
    let (v, y, up) = (random(&[6, 6], &mut rng), random(&[6, 6], &mut rng), random(&[6, 6], &mut rng));
    let rho = RhoParam::from_rho(0.3, RHO_CAP)?;
    let (x, _) = psi_forward(&v, &y, &rho, op.clone(), &tight())?;
    let expect = y.add(&v.scale(0.3))?.scale(1.0 / 1.3);
    let g = psi_backward(&up, &v, &y, &rho, &x, op, &tight())?;
    Ok(x.max_abs_diff(&expect)?.max(g.grad_v.max_abs_diff(&up.scale(0.3 / 1.3))?))
}

fn psi_gradient() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mask = make_mask(MaskPattern::Random1dCartesian, 0.25, 2, 1, 8, 8)?;
    let mut solver = PsiSolver::new(Arc::new(ForwardOperator::masked_fourier(mask, false)));
    solver.cg = tight();
    let (v0, y0, w0) = (random(&[8, 8], &mut rng), random(&[2, 8, 8], &mut rng), Tensor::scalar(0.7));
    let weight = random(&[8, 8], &mut rng);
    let f = |v: &Var, y: &Var, w: &Var| -> Result<Var> {
        let out = solver.apply(v, y, &RhoParam::realize(w, RHO_CAP))?;
        Ok(out.mul(&Var::constant(weight.clone()))?.sq_norm())
    };
    let (v, y, w) = (Var::leaf(v0.clone()), Var::leaf(y0.clone()), Var::leaf(w0.clone()));
    let g = f(&v, &y, &w)?.backward()?;
    let c = Var::constant;
    let nv = finite_difference(|t| Ok(f(&c(t.clone()), &c(y0.clone()), &c(w0.clone()))?.value().item()), &v0, 1e-5)?;
    let ny = finite_difference(|t| Ok(f(&c(v0.clone()), &c(t.clone()), &c(w0.clone()))?.value().item()), &y0, 1e-5)?;
    let nw = finite_difference(|t| Ok(f(&c(v0.clone()), &c(y0.clone()), &c(t.clone()))?.value().item()), &w0, 1e-5)?;
    Ok(relative_error(&g.get_or_zeros(&v), &nv, 1e-8)
        .max(relative_error(&g.get_or_zeros(&y), &ny, 1e-8))
        .max(relative_error(&g.get_or_zeros(&w), &nw, 1e-8)))
}

fn warp_gradient() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = random(&[8, 8], &mut rng);
    let phi = identity_map(8, 8).add(&Tensor::from_fn(&[2, 8, 8], |_| rng.random_range(-0.7..0.7)))?;
    let weight = random(&[8, 8], &mut rng);
    let mut worst: f64 = 0.0;
    for mode in [Boundary::Zero, Boundary::Border, Boundary::Periodic] {
        let loss = |i: &Tensor, p: &Tensor| -> Result<f64> { Ok(warp(i, p, mode)?.mul(&weight)?.norm_sq()) };
        let (iv, pv) = (Var::leaf(img.clone()), Var::leaf(phi.clone()));
        let g = warp_var(&iv, &pv, mode)?.mul(&Var::constant(weight.clone()))?.sq_norm().backward()?;
        let fd_phi = finite_difference(|p| loss(&img, p), &phi, 1e-6)?;
        let fd_img = finite_difference(|i| loss(i, &phi), &img, 1e-6)?;
        worst = worst
            .max(relative_error(&g.get_or_zeros(&pv), &fd_phi, 1e-8))
            .max(relative_error(&g.get_or_zeros(&iv), &fd_img, 1e-8));
    }
    Ok(worst)
}

fn zero_momentum_identity() -> Result<f64> {
    let kernel = GaussianKernel::new(KernelConfig::for_grid(16, 16), 16, 16)?;
    let traj = epdiff_shoot(&Tensor::zeros(&[2, 16, 16]), &kernel, &IntegratorConfig::default())?;
    let id = identity_map(16, 16);
    Ok(traj.phi.max_abs_diff(&id)?.max(traj.phi_inv.max_abs_diff(&id)?))
}

fn pipeline_gradient() -> Result<f64> {
    let mut cfg = PipelineConfig::new(8, 8);
    cfg.stages = 1;
    cfg.init = Init::Adjoint;
    cfg.lambda = LambdaArch {
        base: 4,
        wide: 4,
        slope: 0.2,
    };
    cfg.gamma = GammaArch {
        hidden: 4,
        ..GammaArch::default()
    };
    cfg.integrator.steps = 4;
    cfg.operator = OperatorSpec::MaskedFourier {
        pattern: MaskPattern::Random2d,
        rate: 0.5,
        center: 2,
        seed: 1,
        complex_domain: false,
    };
    let ctx = Context::new(cfg.clone())?;
    let mut model = Model::init(&cfg, 5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tensors = model.stage_tensors(0);
    let last = tensors.len() - 1;
    let r3 = tensors.len() - 3;
    tensors[r3] = Tensor::from_fn(tensors[r3].shape(), |_| rng.random_range(-0.3..0.3));
    model.set_stage_tensors(0, &tensors)?;

    let f = Tensor::from_fn(&[8, 8], |_| rng.random_range(0.0..1.0));
    let g = Tensor::from_fn(&[8, 8], |_| rng.random_range(0.0..1.0));
    let m_tilde = random(&[2, 8, 8], &mut rng).scale(0.1);
    let y = simulate_measurement(&f, &ctx.op, &NoiseModel::none())?;
    let t0 = ctx.initial(&y)?;
    let loss_cfg = LossConfig {
        alpha: vec![1.0],
        beta: vec![0.5],
    };
    let loss_of = |model: &Model| -> Result<(Var, Vec<Var>)> {
        let vars = vec![StageVars::new(&model.stages[0], true)];
        let states = pipeline_forward(&ctx, model, &vars, &g, &y, &t0)?;
        let all = vars[0].all();
        Ok((loss_cfg.evaluate(&states, &f, &m_tilde)?.total, all))
    };
    let (total, vars) = loss_of(&model)?;
    let grads = total.backward()?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (ti, ei) in [(0, 5), (2, 17), (r3, 20), (r3 + 1, 0), (last, 0)] {
        let analytic = grads.get_or_zeros(&vars[ti]).data()[ei];
        let eval = |delta: f64| -> Result<f64> {
            let mut m = model.clone();
            let mut ts = m.stage_tensors(0);
            ts[ti].data_mut()[ei] += delta;
            m.set_stage_tensors(0, &ts)?;
            Ok(loss_of(&m)?.0.value().item())
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8));
    }
    Ok(worst)
}

fn metric_identities() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = Tensor::from_fn(&[16, 16], |_| rng.random_range(0.0..1.0));
    let p = psnr(&img, &img, 1.0)?;
    let s = ssim(&img, &img, 1.0)?;
    Ok(if p == f64::INFINITY { (s - 1.0).abs() } else { f64::INFINITY })
}

/// Runs every self-test; each finishes in well under a second or two.
pub fn self_tests() -> Vec<CheckResult> {
    let mut out = Vec::new();
    adjoint_checks(&mut out);
    out.push(bound("psi identity closed form", psi_identity_closed_form(), 1e-8));
    out.push(bound("psi gradient vs finite differences", psi_gradient(), 1e-4));
    out.push(bound("warp gradient vs finite differences", warp_gradient(), 1e-4));
    out.push(bound("zero momentum shoots the identity", zero_momentum_identity(), f64::MIN_POSITIVE));
    out.push(bound("one-stage pipeline gradient vs finite differences", pipeline_gradient(), 1e-3));
    out.push(bound("psnr and ssim of identical images", metric_identities(), 1e-12));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_passes() {
        for r in self_tests() {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
