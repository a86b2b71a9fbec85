use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{join_list, KeyValue};
use crate::diff::Var;
use crate::error::{Error, Result};
use crate::inversion::{tv_reconstruct, CgConfig, PsiSolver, RhoParam, SolveMethod, TvConfig, RHO_CAP};
use crate::lddmm::{epdiff_shoot, warp, Boundary, GaussianKernel, IntegratorConfig, KernelConfig, Scheme};
use crate::operators::{ForwardOperator, MaskPattern, OperatorSpec};
use crate::regnets::{gamma_forward, lambda_forward, GammaArch, LambdaArch, NetVars, NetWeights, RegNet};
use crate::tensor::Tensor;

use super::stage::{stage_forward, DRState, LearnedPhi};

/// Learned penalties reported for MRI, sparse-view CT and low-dose CT, usable
/// as warm starts.
pub const RHO_PRESET_MRI: [f64; 3] = [0.16, 0.26, 0.33];
pub const RHO_PRESET_CT_SPARSE: [f64; 3] = [0.55, 0.34, 0.41];
pub const RHO_PRESET_CT_LOWDOSE: [f64; 3] = [0.64, 0.42, 0.38];

/// How `t⁰` is obtained from the measurement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Tv,
    Adjoint,
}

impl fmt::Display for Init {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Init::Tv => "tv",
            Init::Adjoint => "adjoint",
        })
    }
}

impl FromStr for Init {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tv" => Ok(Init::Tv),
            "adjoint" => Ok(Init::Adjoint),
            _ => Err(Error::config(format!("unknown initialisation '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub stages: usize,
    pub h: usize,
    pub w: usize,
    pub operator: OperatorSpec,
    pub kernel: KernelConfig,
    pub integrator: IntegratorConfig,
    pub lambda: LambdaArch,
    pub gamma: GammaArch,
    pub init: Init,
    pub tv: TvConfig,
    pub cg: CgConfig,
    pub rho_cap: f64,
    /// Initial penalty per stage; missing entries use `rho_cap / 2`.
    pub rho_init: Vec<f64>,
}

impl PipelineConfig {
    /// Three stages on an `h × w` grid with a quarter-rate radial mask.
    pub fn new(h: usize, w: usize) -> Self {
        PipelineConfig {
            stages: 3,
            h,
            w,
            operator: OperatorSpec::MaskedFourier {
                pattern: MaskPattern::Radial,
                rate: 0.25,
                center: 4,
                seed: 0,
                complex_domain: false,
            },
            kernel: KernelConfig::for_grid(h, w),
            integrator: IntegratorConfig::default(),
            lambda: LambdaArch::default(),
            gamma: GammaArch::default(),
            init: Init::Tv,
            tv: TvConfig::default(),
            cg: CgConfig::default(),
            rho_cap: RHO_CAP,
            rho_init: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::config("pipeline needs at least one stage"));
        }
        if !(self.rho_cap > 0.0) {
            return Err(Error::config("rho cap must be positive"));
        }
        self.kernel.validate()?;
        self.integrator.validate()?;
        self.cg.validate()
    }

    pub fn write_kv(&self, kv: &mut KeyValue) {
        kv.set("stages", self.stages);
        kv.set("height", self.h);
        kv.set("width", self.w);
        self.operator.write_kv(kv);
        kv.set("kernel_sigma", self.kernel.sigma);
        kv.set("gamma", self.kernel.gamma);
        kv.set("steps", self.integrator.steps);
        kv.set("squarings", self.integrator.squarings);
        kv.set("lambda_base", self.lambda.base);
        kv.set("lambda_wide", self.lambda.wide);
        kv.set("lambda_slope", self.lambda.slope);
        kv.set("gamma_hidden", self.gamma.hidden);
        kv.set("gamma_residual", self.gamma.residual);
        kv.set("gamma_slope", self.gamma.slope);
        kv.set("gamma_squarings", self.gamma.squarings);
        kv.set("gamma_sign", self.gamma.sign);
        kv.set("init", self.init);
        kv.set("tv_alpha", self.tv.alpha);
        kv.set("tv_iters", self.tv.iters);
        kv.set("cg_tolerance", self.cg.rel_tolerance);
        kv.set("cg_max_iters", self.cg.max_iters);
        kv.set("rho_cap", self.rho_cap);
        kv.set("rho_init", join_list(&self.rho_init));
    }

    /// Reads a configuration, defaulting every missing key.
    pub fn from_kv(kv: &KeyValue) -> Result<Self> {
        let h = kv.get_or("height", 64)?;
        let w = kv.get_or("width", 64)?;
        let d = PipelineConfig::new(h, w);
        let operator = if kv.contains("operator") {
            OperatorSpec::from_kv(kv)?
        } else {
            d.operator
        };
        Ok(PipelineConfig {
            stages: kv.get_or("stages", d.stages)?,
            h,
            w,
            operator,
            kernel: KernelConfig {
                sigma: kv.get_or("kernel_sigma", d.kernel.sigma)?,
                gamma: kv.get_or("gamma", d.kernel.gamma)?,
            },
            integrator: IntegratorConfig {
                steps: kv.get_or("steps", d.integrator.steps)?,
                scheme: Scheme::EulerEpdiff,
                squarings: kv.get_or("squarings", d.integrator.squarings)?,
            },
            lambda: LambdaArch {
                base: kv.get_or("lambda_base", d.lambda.base)?,
                wide: kv.get_or("lambda_wide", d.lambda.wide)?,
                slope: kv.get_or("lambda_slope", d.lambda.slope)?,
            },
            gamma: GammaArch {
                hidden: kv.get_or("gamma_hidden", d.gamma.hidden)?,
                residual: kv.get_or("gamma_residual", d.gamma.residual)?,
                slope: kv.get_or("gamma_slope", d.gamma.slope)?,
                squarings: kv.get_or("gamma_squarings", d.gamma.squarings)?,
                sign: kv.get_or("gamma_sign", d.gamma.sign)?,
            },
            init: kv.get_or("init", d.init)?,
            tv: TvConfig {
                alpha: kv.get_or("tv_alpha", d.tv.alpha)?,
                iters: kv.get_or("tv_iters", d.tv.iters)?,
                ..d.tv
            },
            cg: CgConfig {
                rel_tolerance: kv.get_or("cg_tolerance", d.cg.rel_tolerance)?,
                max_iters: kv.get_or("cg_max_iters", d.cg.max_iters)?,
            },
            rho_cap: kv.get_or("rho_cap", d.rho_cap)?,
            rho_init: if kv.contains("rho_init") { kv.get_list("rho_init")? } else { Vec::new() },
        })
    }
}

/// Operator, solver and kernel built once from a [`PipelineConfig`].
#[derive(Clone, Debug)]
pub struct Context {
    pub cfg: PipelineConfig,
    pub op: Arc<ForwardOperator>,
    pub psi: PsiSolver,
    pub kernel: GaussianKernel,
}

impl Context {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let op = Arc::new(cfg.operator.build(cfg.h, cfg.w)?);
        if op.domain_shape() != [cfg.h, cfg.w] {
            return Err(Error::config("the pipeline needs a real single-channel image domain"));
        }
        let mut psi = PsiSolver::new(op.clone()).with_method(SolveMethod::Auto);
        psi.cg = cfg.cg;
        let kernel = GaussianKernel::new(cfg.kernel, cfg.h, cfg.w)?;
        Ok(Context { cfg, op, psi, kernel })
    }

    /// `t⁰` from the measurement.
    pub fn initial(&self, y: &Tensor) -> Result<Tensor> {
        match self.cfg.init {
            Init::Tv => tv_reconstruct(y, &self.op, &self.cfg.tv),
            Init::Adjoint => self.op.adjoint(y),
        }
    }
}

/// Parameters of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    pub net: RegNet,
    pub rho: RhoParam,
}

/// All stage parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub stages: Vec<StageParams>,
}

impl Model {
    pub fn init(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        for k in 0..cfg.stages {
            let rho = cfg.rho_init.get(k).copied().unwrap_or(cfg.rho_cap / 2.0);
            stages.push(StageParams {
                net: RegNet::init(cfg.lambda, cfg.gamma, k, &mut rng),
                rho: RhoParam::from_rho(rho, cfg.rho_cap)?,
            });
        }
        Ok(Model { stages })
    }

    pub fn rhos(&self) -> Vec<f64> {
        self.stages.iter().map(|s| s.rho.rho()).collect()
    }

    /// Every trainable tensor of stage `k`, `w` last as a `[1]` tensor.
    pub fn stage_tensors(&self, k: usize) -> Vec<Tensor> {
        let s = &self.stages[k];
        let mut out: Vec<Tensor> = s.net.theta1.params().iter().map(|(_, t)| t.clone()).collect();
        out.extend(s.net.theta2.params().iter().map(|(_, t)| t.clone()));
        out.push(Tensor::scalar(s.rho.w));
        out
    }

    /// Writes back tensors in [`Model::stage_tensors`] order.
    pub fn set_stage_tensors(&mut self, k: usize, tensors: &[Tensor]) -> Result<()> {
        let s = &mut self.stages[k];
        let n1 = s.net.theta1.len();
        let n2 = s.net.theta2.len();
        if tensors.len() != n1 + n2 + 1 {
            return Err(Error::config("parameter count mismatch"));
        }
        for (dst, src) in s.net.theta1.params_mut().chain(s.net.theta2.params_mut()).zip(tensors) {
            src.same_shape(dst, "set_stage_tensors")?;
            *dst = src.clone();
        }
        s.rho.w = tensors[n1 + n2].item();
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.net.theta1.num_scalars() + s.net.theta2.num_scalars() + 1)
            .sum()
    }

    /// Writes one manifest and tensor set per network and stage, plus
    /// `model.txt` with the penalties.
    pub fn save(&self, dir: impl AsRef<Path>, cfg: &PipelineConfig) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut kv = KeyValue::new();
        cfg.write_kv(&mut kv);
        for (k, s) in self.stages.iter().enumerate() {
            s.net.theta1.save(dir, &format!("stage{k}_lambda"), &cfg.lambda.to_kv())?;
            s.net.theta2.save(dir, &format!("stage{k}_gamma"), &cfg.gamma.to_kv())?;
            kv.set(&format!("stage{k}.rho_w"), s.rho.w);
            kv.set(&format!("stage{k}.rho"), s.rho.rho());
        }
        kv.save(dir.join("model.txt"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, PipelineConfig)> {
        let dir = dir.as_ref();
        let kv = KeyValue::load(dir.join("model.txt"))?;
        let cfg = PipelineConfig::from_kv(&kv)?;
        let mut stages = Vec::new();
        for k in 0..cfg.stages {
            let (theta1, _) = NetWeights::load(dir, &format!("stage{k}_lambda"))?;
            let (theta2, _) = NetWeights::load(dir, &format!("stage{k}_gamma"))?;
            let net = RegNet {
                lambda_arch: cfg.lambda,
                gamma_arch: cfg.gamma,
                theta1,
                theta2,
            };
            net.check()?;
            stages.push(StageParams {
                net,
                rho: RhoParam {
                    w: kv.get(&format!("stage{k}.rho_w"))?,
                    c: cfg.rho_cap,
                },
            });
        }
        Ok((Model { stages }, cfg))
    }
}

/// Graph variables for one stage.
pub struct StageVars {
    pub theta1: NetVars,
    pub theta2: NetVars,
    pub w: Var,
}

impl StageVars {
    pub fn new(s: &StageParams, trainable: bool) -> Self {
        let w = Tensor::scalar(s.rho.w);
        StageVars {
            theta1: s.net.theta1.to_vars(trainable),
            theta2: s.net.theta2.to_vars(trainable),
            w: if trainable { Var::leaf(w) } else { Var::constant(w) },
        }
    }

    /// Variables in [`Model::stage_tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        self.theta1
            .vars()
            .chain(self.theta2.vars())
            .cloned()
            .chain(std::iter::once(self.w.clone()))
            .collect()
    }
}

/// Runs stages `0..vars.len()` from `t0`; returns every state including the
/// initial one.
pub fn pipeline_forward(
    ctx: &Context,
    model: &Model,
    vars: &[StageVars],
    g: &Tensor,
    y: &Tensor,
    t0: &Tensor,
) -> Result<Vec<DRState>> {
    if vars.len() > model.stages.len() {
        return Err(Error::config("more stage variables than stages"));
    }
    let gv = Var::constant(g.clone());
    let yv = Var::constant(y.clone());
    let mut states = vec![DRState::initial(Var::constant(t0.clone()))];
    for (k, sv) in vars.iter().enumerate() {
        let phi = LearnedPhi {
            net: &model.stages[k].net,
            kernel: &ctx.kernel,
            theta1: &sv.theta1,
            theta2: &sv.theta2,
        };
        let rho = RhoParam::realize(&sv.w, model.stages[k].rho.c);
        let next = stage_forward(states.last().expect("non-empty"), &gv, &yv, &phi, &ctx.psi, &rho)?;
        states.push(next);
    }
    Ok(states)
}

/// All stages with frozen parameters.
pub fn run_pipeline(ctx: &Context, model: &Model, g: &Tensor, y: &Tensor, t0: &Tensor) -> Result<Vec<DRState>> {
    let vars: Vec<StageVars> = model.stages.iter().map(|s| StageVars::new(s, false)).collect();
    pipeline_forward(ctx, model, &vars, g, y, t0)
}

/// Stage weights `αᵢ` on `‖uⁱ − f‖²` and `βᵢ` on `‖mⁱ − m̃‖²`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LossConfig {
    /// `αᵢ = 2^(i−N)`, `βᵢ = 0.1·2^(i−N)`.
    pub fn geometric(n: usize) -> Self {
        let alpha: Vec<f64> = (1..=n).map(|i| 2f64.powi(i as i32 - n as i32)).collect();
        let beta = alpha.iter().map(|a| 0.1 * a).collect();
        LossConfig { alpha, beta }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.alpha.len() < n || self.beta.len() < n {
            return Err(Error::config(format!("loss weights needed for {n} stages")));
        }
        if !(self.alpha[n - 1] > 0.0) || self.alpha.iter().chain(&self.beta).any(|&v| !(v >= 0.0)) {
            return Err(Error::config("loss weights must be non-negative with a positive final alpha"));
        }
        Ok(())
    }

    /// Loss over the states after stages `1..=n`, where `n = states.len() − 1`:
    /// `α_n‖uⁿ − f‖² + Σ αᵢ‖uⁱ − f‖² + Σ βᵢ‖mⁱ − m̃‖²`.
    pub fn evaluate(&self, states: &[DRState], f: &Tensor, m_tilde: &Tensor) -> Result<LossTerms> {
        let n = states.len().saturating_sub(1);
        if n == 0 {
            return Err(Error::config("loss needs at least one stage"));
        }
        self.validate(n)?;
        let fv = Var::constant(f.clone());
        let mv = Var::constant(m_tilde.clone());
        let final_err = states[n].u.sub(&fv)?.sq_norm();
        let mut total = final_err.scale(self.alpha[n - 1]);
        let (mut image, mut momentum) = (0.0, 0.0);
        for i in 1..=n {
            let e = states[i].u.sub(&fv)?.sq_norm();
            image += self.alpha[i - 1] * e.value().item();
            total = total.add(&e.scale(self.alpha[i - 1]))?;
            if let Some(m) = &states[i].m {
                if self.beta[i - 1] > 0.0 {
                    let d = m.sub(&mv)?.sq_norm();
                    momentum += self.beta[i - 1] * d.value().item();
                    total = total.add(&d.scale(self.beta[i - 1]))?;
                }
            }
        }
        Ok(LossTerms {
            final_term: self.alpha[n - 1] * final_err.value().item(),
            image_terms: image,
            momentum_terms: momentum,
            total,
        })
    }
}

/// Loss value with its breakdown.
pub struct LossTerms {
    pub final_term: f64,
    pub image_terms: f64,
    pub momentum_terms: f64,
    pub total: Var,
}

impl LossTerms {
    pub fn value(&self) -> f64 {
        self.total.value().item()
    }
}

/// Inference output mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferMode {
    /// `u* = Φ(t^N, g)` with the last stage's networks.
    NetOutput,
    /// `u* = g∘φ(1)` from geodesic shooting of the predicted momentum.
    ShootWarp,
}

impl fmt::Display for InferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferMode::NetOutput => "net-output",
            InferMode::ShootWarp => "shoot-warp",
        })
    }
}

impl FromStr for InferMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "net-output" => Ok(InferMode::NetOutput),
            "shoot-warp" => Ok(InferMode::ShootWarp),
            _ => Err(Error::config(format!("unknown inference mode '{s}'"))),
        }
    }
}

/// `g∘φ(1)` for the geodesic shot from `m`.
pub fn shoot_warp(g: &Tensor, m: &Tensor, kernel: &GaussianKernel, integ: &IntegratorConfig) -> Result<Tensor> {
    let traj = epdiff_shoot(m, kernel, integ)?;
    warp(g, &traj.phi, Boundary::Zero)
}

/// Result of [`infer`].
#[derive(Clone, Debug)]
pub struct Inference {
    pub u: Tensor,
    pub m: Tensor,
    /// `u¹ … u^N`.
    pub stage_images: Vec<Tensor>,
}

/// Runs all stages, predicts `m* = Λ(t^N, g)` with the last stage's
/// momentum net and reconstructs according to `mode`.
pub fn infer(ctx: &Context, model: &Model, g: &Tensor, y: &Tensor, t0: &Tensor, mode: InferMode) -> Result<Inference> {
    let states = run_pipeline(ctx, model, g, y, t0)?;
    let last = model.stages.last().ok_or_else(|| Error::config("empty model"))?;
    let t_n = states.last().expect("non-empty").t.value();
    let m = lambda_forward(t_n, g, &last.net.lambda_arch, &last.net.theta1)?;
    let u = match mode {
        InferMode::NetOutput => gamma_forward(&m, g, &last.net.gamma_arch, &ctx.kernel, &last.net.theta2)?,
        InferMode::ShootWarp => shoot_warp(g, &m, &ctx.kernel, &ctx.cfg.integrator)?,
    };
    u.ensure_finite()?;
    Ok(Inference {
        u,
        m,
        stage_images: states[1..].iter().map(|s| s.u.value().clone()).collect(),
    })
}
