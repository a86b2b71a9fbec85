use rand::Rng;

use crate::config::KeyValue;
use crate::diff::Var;
use crate::error::{Error, Result};
use crate::lddmm::{svf_exp_var, warp_var, Boundary, GaussianKernel, IntegratorConfig, Scheme};
use crate::tensor::Tensor;

use super::weights::{ConvSpec, NetVars, NetWeights};

/// Encoder-decoder momentum predictor: `2 → b → w → w → w → b → 2`
/// channels, two stride-2 downsamplings mirrored by two nearest-neighbour
/// upsamplings, leaky rectifiers between layers and a linear last layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaArch {
    pub base: usize,
    pub wide: usize,
    pub slope: f64,
}

impl Default for LambdaArch {
    fn default() -> Self {
        LambdaArch {
            base: 16,
            wide: 32,
            slope: 0.2,
        }
    }
}

impl LambdaArch {
    /// Spatial extents must be divisible by this.
    pub const DOWNSAMPLE: usize = 4;

    pub fn layers(&self) -> Vec<ConvSpec> {
        let (b, w) = (self.base, self.wide);
        vec![
            ConvSpec::new("l1", 2, b, 1),
            ConvSpec::new("l2", b, w, 2),
            ConvSpec::new("l3", w, w, 2),
            ConvSpec::new("l4", w, w, 1),
            ConvSpec::new("l5", w, b, 1),
            ConvSpec::new("l6", b, 2, 1),
        ]
    }

    pub fn init(&self, stage: usize, rng: &mut impl Rng) -> NetWeights {
        NetWeights::init(&self.layers(), stage, &[], rng)
    }

    pub fn to_kv(&self) -> KeyValue {
        let mut kv = KeyValue::new();
        kv.set("arch", "lambda");
        kv.set("base", self.base);
        kv.set("wide", self.wide);
        kv.set("slope", self.slope);
        kv
    }

    pub fn from_kv(kv: &KeyValue) -> Result<Self> {
        Ok(LambdaArch {
            base: kv.get("base")?,
            wide: kv.get("wide")?,
            slope: kv.get("slope")?,
        })
    }
}

/// Shooting-warping net: smoothing, stationary exponential and warp of the
/// template, plus an optional residual CNN `3 → h → h → 1` on
/// `[warped, m]` whose last layer starts at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaArch {
    pub hidden: usize,
    pub residual: bool,
    pub slope: f64,
    /// Squaring levels of the exponential.
    pub squarings: usize,
    /// Direction of the exponential; `+1` warps the template by `exp(Km)`.
    pub sign: f64,
}

impl Default for GammaArch {
    fn default() -> Self {
        GammaArch {
            hidden: 16,
            residual: true,
            slope: 0.2,
            squarings: 6,
            sign: 1.0,
        }
    }
}

impl GammaArch {
    pub fn layers(&self) -> Vec<ConvSpec> {
        if !self.residual {
            return Vec::new();
        }
        let h = self.hidden;
        vec![
            ConvSpec::new("r1", 3, h, 1),
            ConvSpec::new("r2", h, h, 1),
            ConvSpec::new("r3", h, 1, 1),
        ]
    }

    pub fn init(&self, stage: usize, rng: &mut impl Rng) -> NetWeights {
        NetWeights::init(&self.layers(), stage, &["r3"], rng)
    }

    fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig {
            steps: 1,
            scheme: Scheme::ScalingSquaringSvf,
            squarings: self.squarings,
        }
    }

    pub fn to_kv(&self) -> KeyValue {
        let mut kv = KeyValue::new();
        kv.set("arch", "gamma");
        kv.set("hidden", self.hidden);
        kv.set("residual", self.residual);
        kv.set("slope", self.slope);
        kv.set("squarings", self.squarings);
        kv.set("sign", self.sign);
        kv
    }

    pub fn from_kv(kv: &KeyValue) -> Result<Self> {
        Ok(GammaArch {
            hidden: kv.get("hidden")?,
            residual: kv.get("residual")?,
            slope: kv.get("slope")?,
            squarings: kv.get("squarings")?,
            sign: kv.get("sign")?,
        })
    }
}

fn as_image(x: &Var) -> Result<Var> {
    match x.shape() {
        [h, w] => x.reshape(&[1, *h, *w]),
        [1, _, _] => Ok(x.clone()),
        s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected a single-channel image".into(),
        }),
    }
}

/// Differentiable momentum prediction `m = Λ(t, g)`, shape `[2, H, W]`.
pub fn lambda_forward_var(t: &Var, g: &Var, arch: &LambdaArch, params: &NetVars) -> Result<Var> {
    let (t, g) = (as_image(t)?, as_image(g)?);
    if t.shape() != g.shape() {
        return Err(Error::ShapeMismatch {
            op: "lambda_forward",
            left: t.shape().to_vec(),
            right: g.shape().to_vec(),
        });
    }
    let (h, w) = (t.shape()[1], t.shape()[2]);
    if h % LambdaArch::DOWNSAMPLE != 0 || w % LambdaArch::DOWNSAMPLE != 0 {
        return Err(Error::InvalidShape {
            shape: vec![h, w],
            reason: format!("grid must be divisible by {}", LambdaArch::DOWNSAMPLE),
        });
    }
    let l = arch.layers();
    let act = |x: Var| x.leaky_relu(arch.slope);
    let x = Var::concat(&[&t, &g], 0)?;
    let x = act(params.conv(&x, &l[0])?);
    let x = act(params.conv(&x, &l[1])?);
    let x = act(params.conv(&x, &l[2])?);
    let x = act(params.conv(&x, &l[3])?).upsample2()?;
    let x = act(params.conv(&x, &l[4])?).upsample2()?;
    params.conv(&x, &l[5])
}

/// Differentiable shooting-warping prediction `Γ(m, g)`, shape `[H, W]`.
pub fn gamma_forward_var(
    m: &Var,
    g: &Var,
    arch: &GammaArch,
    kernel: &GaussianKernel,
    params: &NetVars,
) -> Result<Var> {
    let g_img = as_image(g)?;
    let (h, w) = (g_img.shape()[1], g_img.shape()[2]);
    m.value().expect_shape(&[2, h, w], "gamma_forward")?;
    let v = kernel.apply_var(m)?;
    let phi = svf_exp_var(&v, &arch.integrator(), arch.sign)?;
    let base = warp_var(&g_img, &phi, Boundary::Zero)?;
    let out = if arch.residual {
        let l = arch.layers();
        let x = Var::concat(&[&base, m], 0)?;
        let x = params.conv(&x, &l[0])?.leaky_relu(arch.slope);
        let x = params.conv(&x, &l[1])?.leaky_relu(arch.slope);
        base.add(&params.conv(&x, &l[2])?)?
    } else {
        base
    };
    out.reshape(&[h, w])
}

/// Both networks of one registration block.
#[derive(Clone, Debug, PartialEq)]
pub struct RegNet {
    pub lambda_arch: LambdaArch,
    pub gamma_arch: GammaArch,
    pub theta1: NetWeights,
    pub theta2: NetWeights,
}

impl RegNet {
    pub fn init(lambda_arch: LambdaArch, gamma_arch: GammaArch, stage: usize, rng: &mut impl Rng) -> Self {
        RegNet {
            lambda_arch,
            gamma_arch,
            theta1: lambda_arch.init(stage, rng),
            theta2: gamma_arch.init(stage, rng),
        }
    }

    pub fn check(&self) -> Result<()> {
        self.theta1.check(&self.lambda_arch.layers())?;
        self.theta2.check(&self.gamma_arch.layers())
    }
}

/// `Φ(t, g) = Γ(Λ(t, g), g)` on graph variables; returns `(f, m)`.
pub fn phi_forward_var(
    t: &Var,
    g: &Var,
    net: &RegNet,
    kernel: &GaussianKernel,
    theta1: &NetVars,
    theta2: &NetVars,
) -> Result<(Var, Var)> {
    let m = lambda_forward_var(t, g, &net.lambda_arch, theta1)?;
    let f = gamma_forward_var(&m, g, &net.gamma_arch, kernel, theta2)?;
    Ok((f, m))
}

/// Momentum prediction on plain tensors.
pub fn lambda_forward(t: &Tensor, g: &Tensor, arch: &LambdaArch, theta1: &NetWeights) -> Result<Tensor> {
    theta1.check(&arch.layers())?;
    let out = lambda_forward_var(
        &Var::constant(t.clone()),
        &Var::constant(g.clone()),
        arch,
        &theta1.to_vars(false),
    )?;
    Ok(out.value().clone())
}

/// Shooting-warping prediction on plain tensors.
pub fn gamma_forward(
    m: &Tensor,
    g: &Tensor,
    arch: &GammaArch,
    kernel: &GaussianKernel,
    theta2: &NetWeights,
) -> Result<Tensor> {
    theta2.check(&arch.layers())?;
    let out = gamma_forward_var(
        &Var::constant(m.clone()),
        &Var::constant(g.clone()),
        arch,
        kernel,
        &theta2.to_vars(false),
    )?;
    Ok(out.value().clone())
}

/// `Φ(t, g)` on plain tensors; returns the prediction and its momentum.
pub fn phi_forward(t: &Tensor, g: &Tensor, net: &RegNet, kernel: &GaussianKernel) -> Result<(Tensor, Tensor)> {
    let m = lambda_forward(t, g, &net.lambda_arch, &net.theta1)?;
    let f = gamma_forward(&m, g, &net.gamma_arch, kernel, &net.theta2)?;
    Ok((f, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_difference, relative_error};
    use crate::lddmm::{identity_map, warp, KernelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w], |_| rng.random_range(0.0..1.0))
    }

    fn small_lambda() -> LambdaArch {
        LambdaArch {
            base: 3,
            wide: 4,
            slope: 0.2,
        }
    }

    #[test]
    fn zero_lambda_gives_zero_momentum() {
        let arch = LambdaArch::default();
        let th = NetWeights::zeros(&arch.layers(), 0);
        let m = lambda_forward(&image(16, 12, 1), &image(16, 12, 2), &arch, &th).unwrap();
        assert_eq!(m.shape(), &[2, 16, 12]);
        assert_eq!(m.max_abs(), 0.0);
    }

    #[test]
    fn lambda_rejects_bad_grid_and_weights() {
        let arch = LambdaArch::default();
        let th = NetWeights::zeros(&arch.layers(), 0);
        assert!(lambda_forward(&image(10, 12, 1), &image(10, 12, 2), &arch, &th).is_err());
        let other = NetWeights::zeros(&small_lambda().layers(), 0);
        assert!(lambda_forward(&image(8, 8, 1), &image(8, 8, 2), &arch, &other).is_err());
    }

    #[test]
    fn lambda_kernel_gradient_matches_finite_differences() {
        let arch = small_lambda();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let th = arch.init(0, &mut rng);
        let (t, g) = (image(8, 8, 6), image(8, 8, 7));
        let vars = th.to_vars(true);
        let m = lambda_forward_var(&Var::constant(t.clone()), &Var::constant(g.clone()), &arch, &vars).unwrap();
        let grads = m.sq_norm().backward().unwrap();
        for name in ["l1.w", "l3.w", "l6.w", "l5.b"] {
            let analytic = grads.get_or_zeros(vars.get(name).unwrap());
            let fd = finite_difference(
                |p| {
                    let params: Vec<(String, Tensor)> = th
                        .params()
                        .iter()
                        .map(|(n, v)| (n.clone(), if n == name { p.clone() } else { v.clone() }))
                        .collect();
                    Ok(lambda_forward(&t, &g, &arch, &NetWeights::new(0, params))?.norm_sq())
                },
                th.get(name).unwrap(),
                1e-6,
            )
            .unwrap();
            assert!(relative_error(&analytic, &fd, 1e-8) < 1e-4, "{name}");
        }
    }

    #[test]
    fn gamma_with_zero_momentum_is_identity() {
        let arch = GammaArch::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let th = arch.init(0, &mut rng);
        let k = GaussianKernel::new(KernelConfig::for_grid(16, 16), 16, 16).unwrap();
        let g = image(16, 16, 3);
        let out = gamma_forward(&Tensor::zeros(&[2, 16, 16]), &g, &arch, &k, &th).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn gamma_constant_momentum_translates() {
        let arch = GammaArch {
            residual: false,
            ..GammaArch::default()
        };
        let th = NetWeights::zeros(&arch.layers(), 0);
        let k = GaussianKernel::new(KernelConfig::for_grid(16, 16), 16, 16).unwrap();
        let g = image(16, 16, 4);
        let m = Tensor::from_fn(&[2, 16, 16], |i| if i < 256 { 1.25 } else { -0.5 });
        let out = gamma_forward(&m, &g, &arch, &k, &th).unwrap();
        let mut shift = identity_map(16, 16);
        for (i, v) in shift.data_mut().iter_mut().enumerate() {
            *v += if i < 256 { 1.25 } else { -0.5 };
        }
        let expect = warp(&g, &shift, Boundary::Zero).unwrap();
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-3);
    }

    #[test]
    fn gamma_momentum_gradient_matches_finite_differences() {
        let arch = GammaArch {
            hidden: 4,
            ..GammaArch::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut th = arch.init(0, &mut rng);
        // give the residual branch a non-zero last layer so it is exercised
        for t in th.params_mut() {
            if t.data().iter().all(|&v| v == 0.0) && t.rank() == 4 {
                *t = Tensor::from_fn(t.shape(), |_| rng.random_range(-0.3..0.3));
            }
        }
        let k = GaussianKernel::new(KernelConfig { sigma: 1.0, gamma: 1.0 }, 8, 8).unwrap();
        let g = image(8, 8, 9);
        let m0 = Tensor::from_fn(&[2, 8, 8], |_| rng.random_range(-0.8..0.8));
        let weight = image(8, 8, 10);
        let mv = Var::leaf(m0.clone());
        let out = gamma_forward_var(&mv, &Var::constant(g.clone()), &arch, &k, &th.to_vars(false)).unwrap();
        let grads = out.mul(&Var::constant(weight.clone())).unwrap().sum().backward().unwrap();
        let fd = finite_difference(
            |m| Ok(gamma_forward(m, &g, &arch, &k, &th)?.mul(&weight)?.sum()),
            &m0,
            1e-6,
        )
        .unwrap();
        assert!(relative_error(grads.get(&mv).unwrap(), &fd, 1e-8) < 1e-4);
    }

    #[test]
    fn phi_is_template_at_init_and_deterministic() {
        let lam = LambdaArch::default();
        let gam = GammaArch::default();
        let net = RegNet {
            lambda_arch: lam,
            gamma_arch: gam,
            theta1: NetWeights::zeros(&lam.layers(), 0),
            theta2: gam.init(0, &mut ChaCha8Rng::seed_from_u64(1)),
        };
        let k = GaussianKernel::new(KernelConfig::for_grid(16, 16), 16, 16).unwrap();
        let (t, g) = (image(16, 16, 1), image(16, 16, 2));
        let (f, m) = phi_forward(&t, &g, &net, &k).unwrap();
        assert_eq!(f, g);
        assert_eq!(m.max_abs(), 0.0);

        let net = RegNet::init(lam, gam, 0, &mut ChaCha8Rng::seed_from_u64(3));
        let a = phi_forward(&t, &g, &net, &k).unwrap();
        let b = phi_forward(&t, &g, &net, &k).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn end_to_end_gradient_through_phi() {
        let lam = small_lambda();
        let gam = GammaArch {
            hidden: 3,
            ..GammaArch::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut net = RegNet::init(lam, gam, 0, &mut rng);
        for t in net.theta1.params_mut() {
            *t = t.scale(0.3);
        }
        let k = GaussianKernel::new(KernelConfig { sigma: 1.0, gamma: 1.0 }, 8, 8).unwrap();
        let (t0, g) = (image(8, 8, 13), image(8, 8, 14));
        let target = image(8, 8, 15);
        let loss = |t: &Tensor| -> Result<f64> {
            let (f, m) = phi_forward(t, &g, &net, &k)?;
            Ok(f.sub(&target)?.norm_sq() + 0.1 * m.norm_sq())
        };
        let tv = Var::leaf(t0.clone());
        let (f, m) = phi_forward_var(
            &tv,
            &Var::constant(g.clone()),
            &net,
            &k,
            &net.theta1.to_vars(false),
            &net.theta2.to_vars(false),
        )
        .unwrap();
        let l = f.sub(&Var::constant(target.clone())).unwrap().sq_norm().add(&m.sq_norm().scale(0.1)).unwrap();
        let grads = l.backward().unwrap();
        let fd = finite_difference(loss, &t0, 1e-6).unwrap();
        assert!(relative_error(grads.get(&tv).unwrap(), &fd, 1e-8) < 1e-4);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let arch = LambdaArch::default();
        let th = arch.init(2, &mut ChaCha8Rng::seed_from_u64(4));
        th.save(dir.path(), "stage2_lambda", &arch.to_kv()).unwrap();
        let (back, kv) = NetWeights::load(dir.path(), "stage2_lambda").unwrap();
        assert_eq!(back, th);
        assert_eq!(LambdaArch::from_kv(&kv).unwrap(), arch);
        let (t, g) = (image(8, 8, 1), image(8, 8, 2));
        assert_eq!(
            lambda_forward(&t, &g, &arch, &th).unwrap(),
            lambda_forward(&t, &g, &arch, &back).unwrap()
        );
    }
}
