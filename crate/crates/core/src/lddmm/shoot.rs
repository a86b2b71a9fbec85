use std::fmt;
use std::str::FromStr;

use crate::diff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::kernel::GaussianKernel;
use super::warp::{identity_map, warp_var, Boundary};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    EulerEpdiff,
    ScalingSquaringSvf,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::EulerEpdiff => "euler-epdiff",
            Scheme::ScalingSquaringSvf => "scaling-squaring-svf",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler-epdiff" => Ok(Scheme::EulerEpdiff),
            "scaling-squaring-svf" => Ok(Scheme::ScalingSquaringSvf),
            _ => Err(Error::config(format!("unknown integration scheme '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntegratorConfig {
    /// Time steps over `[0, 1]`.
    pub steps: usize,
    pub scheme: Scheme,
    /// Squaring levels of the stationary exponential.
    pub squarings: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            steps: 10,
            scheme: Scheme::EulerEpdiff,
            squarings: 6,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.squarings == 0 {
            return Err(Error::config(format!("invalid integrator {self:?}")));
        }
        Ok(())
    }
}

fn grid_of(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected [C, H, W]".into(),
        }),
    }
}

/// Periodic central difference of every plane along columns (`axis = 0`)
/// or rows (`axis = 1`).
pub fn central_diff(u: &Tensor, axis: usize) -> Result<Tensor> {
    let (c, h, w) = grid_of(u)?;
    let mut out = Tensor::zeros(u.shape());
    let src = u.data();
    let dst = out.data_mut();
    for p in 0..c {
        let o = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let (a, b) = if axis == 0 {
                    (o + i * w + (j + 1) % w, o + i * w + (j + w - 1) % w)
                } else {
                    (o + ((i + 1) % h) * w + j, o + ((i + h - 1) % h) * w + j)
                };
                dst[o + i * w + j] = 0.5 * (src[a] - src[b]);
            }
        }
    }
    Ok(out)
}

/// Differentiable [`central_diff`]. The periodic stencil is antisymmetric.
pub fn central_diff_var(u: &Var, axis: usize) -> Result<Var> {
    u.linear_map(|x| central_diff(x, axis), move |up| Ok(central_diff(up, axis)?.scale(-1.0)))
}

fn blowup(t: &Var, what: &'static str) -> Result<()> {
    if t.value().is_finite() {
        Ok(())
    } else {
        Err(Error::Blowup(what))
    }
}

/// Scaling-and-squaring exponential of `sign·v` as a displacement field.
pub fn svf_displacement_var(v: &Var, squarings: usize, sign: f64) -> Result<Var> {
    let (_, h, w) = grid_of(v.value())?;
    let id = Var::constant(identity_map(h, w));
    let mut d = v.scale(sign / f64::powi(2.0, squarings as i32));
    for _ in 0..squarings {
        let at = id.add(&d)?;
        d = d.add(&warp_var(&d, &at, Boundary::Periodic)?)?;
    }
    blowup(&d, "svf_exp")?;
    Ok(d)
}

/// Differentiable stationary-velocity exponential, returned as an absolute map.
pub fn svf_exp_var(v: &Var, cfg: &IntegratorConfig, sign: f64) -> Result<Var> {
    cfg.validate()?;
    let (_, h, w) = grid_of(v.value())?;
    let d = svf_displacement_var(v, cfg.squarings, sign)?;
    Var::constant(identity_map(h, w)).add(&d)
}

/// `exp(sign·v)` as an absolute map `[2, H, W]`; `sign = −1` gives the
/// approximate inverse of `sign = +1`.
pub fn svf_exp(v: &Tensor, cfg: &IntegratorConfig, sign: f64) -> Result<Tensor> {
    Ok(svf_exp_var(&Var::constant(v.clone()), cfg, sign)?.value().clone())
}

/// Coadjoint term `ad*_v m = (Dv)ᵀm + (Dm)v + m·div v`.
fn coadjoint(v: &Var, m: &Var) -> Result<Var> {
    let ch = |t: &Var, c: usize| t.slice(0, c, c + 1);
    let (vx, vy, mx, my) = (ch(v, 0)?, ch(v, 1)?, ch(m, 0)?, ch(m, 1)?);
    let dv_dx = central_diff_var(v, 0)?;
    let dv_dy = central_diff_var(v, 1)?;
    let dm_dx = central_diff_var(m, 0)?;
    let dm_dy = central_diff_var(m, 1)?;
    let div = ch(&dv_dx, 0)?.add(&ch(&dv_dy, 1)?)?;

    let tx = ch(&dv_dx, 0)?
        .mul(&mx)?
        .add(&ch(&dv_dx, 1)?.mul(&my)?)?
        .add(&vx.mul(&ch(&dm_dx, 0)?)?)?
        .add(&vy.mul(&ch(&dm_dy, 0)?)?)?
        .add(&mx.mul(&div)?)?;
    let ty = ch(&dv_dy, 0)?
        .mul(&mx)?
        .add(&ch(&dv_dy, 1)?.mul(&my)?)?
        .add(&vx.mul(&ch(&dm_dx, 1)?)?)?
        .add(&vy.mul(&ch(&dm_dy, 1)?)?)?
        .add(&my.mul(&div)?)?;
    Var::concat(&[&tx, &ty], 0)
}

/// Output of geodesic shooting.
#[derive(Clone, Debug)]
pub struct Shot {
    /// `φ(1)` as an absolute map; `None` when not requested.
    pub phi: Option<Var>,
    /// `φ⁻¹(1)` as an absolute map.
    pub phi_inv: Var,
    /// Momenta `m(t)` at every step, `T + 1` entries.
    pub momenta: Vec<Var>,
}

/// Forward-Euler EPDiff shooting from `m0` over `[0, 1]`.
///
/// The inverse map follows `ψ ← ψ∘(Id − εv)` semi-Lagrangianly; the forward
/// map, when `with_forward` is set, follows `φ ← φ + ε v(φ)`.
pub fn epdiff_shoot_var(
    m0: &Var,
    kernel: &GaussianKernel,
    cfg: &IntegratorConfig,
    with_forward: bool,
) -> Result<Shot> {
    cfg.validate()?;
    let (c, h, w) = grid_of(m0.value())?;
    if c != 2 || kernel.grid() != (h, w) {
        return Err(Error::InvalidShape {
            shape: m0.shape().to_vec(),
            reason: format!("momentum must be [2, {}, {}]", kernel.grid().0, kernel.grid().1),
        });
    }
    let eps = 1.0 / cfg.steps as f64;
    let id = Var::constant(identity_map(h, w));
    let zeros = || Var::constant(Tensor::zeros(&[2, h, w]));
    let mut m = m0.clone();
    let mut a = zeros();
    let mut b = zeros();
    let mut momenta = vec![m.clone()];
    for _ in 0..cfg.steps {
        let v = kernel.apply_var(&m)?;
        blowup(&v, "epdiff_shoot")?;
        let back = id.sub(&v.scale(eps))?;
        let a_next = warp_var(&a, &back, Boundary::Periodic)?.sub(&v.scale(eps))?;
        if with_forward {
            let at = id.add(&b)?;
            b = b.add(&warp_var(&v, &at, Boundary::Periodic)?.scale(eps))?;
            blowup(&b, "epdiff_shoot")?;
        }
        m = m.sub(&coadjoint(&v, &m)?.scale(eps))?;
        a = a_next;
        blowup(&m, "epdiff_shoot")?;
        blowup(&a, "epdiff_shoot")?;
        momenta.push(m.clone());
    }
    Ok(Shot {
        phi: if with_forward { Some(id.add(&b)?) } else { None },
        phi_inv: id.add(&a)?,
        momenta,
    })
}

/// Plain-tensor shooting result.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub phi: Tensor,
    pub phi_inv: Tensor,
    pub momenta: Vec<Tensor>,
}

/// Shoots from `m0` and returns `φ(1)`, `φ⁻¹(1)` and the momentum trajectory.
pub fn epdiff_shoot(m0: &Tensor, kernel: &GaussianKernel, cfg: &IntegratorConfig) -> Result<Trajectory> {
    if cfg.scheme != Scheme::EulerEpdiff {
        return Err(Error::config("epdiff_shoot requires the euler-epdiff scheme"));
    }
    let shot = epdiff_shoot_var(&Var::constant(m0.clone()), kernel, cfg, true)?;
    let phi = shot.phi.ok_or(Error::Blowup("epdiff_shoot"))?;
    Ok(Trajectory {
        phi: phi.value().clone(),
        phi_inv: shot.phi_inv.value().clone(),
        momenta: shot.momenta.iter().map(|m| m.value().clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_difference, relative_error};
    use crate::lddmm::kernel::KernelConfig;
    use crate::lddmm::warp::compose;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth random field scaled to the given sup-norm.
    fn smooth_field(h: usize, w: usize, sup: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Tensor::from_fn(&[2, h, w], |_| rng.random_range(-1.0..1.0));
        let k = GaussianKernel::new(KernelConfig { sigma: 4.0, gamma: 1.0 }, h, w).unwrap();
        let s = k.apply(&noise).unwrap();
        let m = s.max_abs();
        s.scale(sup / m)
    }

    #[test]
    fn zero_velocity_gives_identity() {
        let cfg = IntegratorConfig::default();
        let phi = svf_exp(&Tensor::zeros(&[2, 9, 11]), &cfg, 1.0).unwrap();
        assert_eq!(phi, identity_map(9, 11));
    }

    #[test]
    fn constant_velocity_is_translation() {
        let cfg = IntegratorConfig::default();
        let v = Tensor::from_fn(&[2, 16, 16], |k| if k < 256 { 3.0 } else { 0.0 });
        let phi = svf_exp(&v, &cfg, 1.0).unwrap();
        let expect = identity_map(16, 16).add(&v).unwrap();
        assert!(phi.max_abs_diff(&expect).unwrap() < 1e-6);
    }

    #[test]
    fn exponential_is_inverse_consistent() {
        let cfg = IntegratorConfig::default();
        let v = smooth_field(32, 32, 2.0, 7);
        let fwd = svf_exp(&v, &cfg, 1.0).unwrap();
        let inv = svf_exp(&v, &cfg, -1.0).unwrap();
        // (φ₊ ∘ φ₋)(x) = φ₊(φ₋(x))
        let composed = compose(&fwd, &inv).unwrap();
        assert!(composed.max_abs_diff(&identity_map(32, 32)).unwrap() < 0.1);
    }

    #[test]
    fn central_diff_is_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::from_fn(&[2, 6, 7], |_| rng.random_range(-1.0..1.0));
        let b = Tensor::from_fn(&[2, 6, 7], |_| rng.random_range(-1.0..1.0));
        for axis in 0..2 {
            let lhs = central_diff(&a, axis).unwrap().dot(&b).unwrap();
            let rhs = -a.dot(&central_diff(&b, axis).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_momentum_shoots_identity() {
        let k = GaussianKernel::new(KernelConfig::for_grid(16, 16), 16, 16).unwrap();
        let t = epdiff_shoot(&Tensor::zeros(&[2, 16, 16]), &k, &IntegratorConfig::default()).unwrap();
        assert_eq!(t.phi, identity_map(16, 16));
        assert_eq!(t.phi_inv, identity_map(16, 16));
        assert_eq!(t.momenta.len(), 11);
        assert!(t.momenta.iter().all(|m| m.max_abs() == 0.0));
    }

    fn geodesic(seed: u64, steps: usize) -> (GaussianKernel, Trajectory) {
        let k = GaussianKernel::new(KernelConfig::for_grid(32, 32), 32, 32).unwrap();
        let m0 = smooth_field(32, 32, 1.0, seed);
        let v_sup = k.apply(&m0).unwrap().max_abs();
        let m0 = m0.scale(1.5 / v_sup);
        let cfg = IntegratorConfig {
            steps,
            ..IntegratorConfig::default()
        };
        let t = epdiff_shoot(&m0, &k, &cfg).unwrap();
        (k, t)
    }

    #[test]
    fn geodesic_energy_is_nearly_conserved() {
        let (k, t) = geodesic(11, 10);
        let e0 = k.energy(&t.momenta[0]).unwrap();
        for m in &t.momenta {
            let e = k.energy(m).unwrap();
            assert!((e - e0).abs() / e0 < 0.02, "drift {}", (e - e0) / e0);
        }
    }

    #[test]
    fn halving_the_step_changes_little() {
        let (_, coarse) = geodesic(12, 10);
        let (_, fine) = geodesic(12, 20);
        assert!(coarse.phi.max_abs_diff(&fine.phi).unwrap() < 0.5);
    }

    #[test]
    fn forward_and_inverse_maps_compose_to_identity() {
        let (_, t) = geodesic(13, 20);
        let composed = compose(&t.phi, &t.phi_inv).unwrap();
        let err = composed.max_abs_diff(&identity_map(32, 32)).unwrap();
        assert!(err < 0.1, "{err}");
    }

    #[test]
    fn shooting_gradient_matches_finite_differences() {
        let k = GaussianKernel::new(KernelConfig { sigma: 1.5, gamma: 1.0 }, 8, 8).unwrap();
        let m0 = smooth_field(8, 8, 0.8, 4);
        let cfg = IntegratorConfig {
            steps: 4,
            ..IntegratorConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = Tensor::from_fn(&[8, 8], |_| rng.random_range(0.0..1.0));
        let loss = |m: &Var| -> Result<Var> {
            let shot = epdiff_shoot_var(m, &k, &cfg, false)?;
            Ok(warp_var(&Var::constant(img.clone()), &shot.phi_inv, Boundary::Zero)?.sq_norm())
        };
        let mv = Var::leaf(m0.clone());
        let g = loss(&mv).unwrap().backward().unwrap();
        let fd = finite_difference(|m| Ok(loss(&Var::constant(m.clone()))?.value().item()), &m0, 1e-6).unwrap();
        assert!(relative_error(g.get(&mv).unwrap(), &fd, 1e-8) < 1e-4);
    }
}
