use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::Var;
use crate::error::Error;
use crate::inversion::PsiSolver;
use crate::operators::{ForwardOperator, NoiseModel, OperatorSpec};
use crate::regnets::{GammaArch, LambdaArch};
use crate::tensor::Tensor;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
}

fn tiny_config(n: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::new(8, 8);
    cfg.stages = n;
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
        pattern: crate::operators::MaskPattern::Random2d,
        rate: 0.5,
        center: 2,
        seed: 1,
        complex_domain: false,
    };
    cfg
}

fn sample(ctx: &Context, seed: u64) -> TrainingSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (ctx.cfg.h, ctx.cfg.w);
    let f = random(&[h, w], &mut rng);
    let g = random(&[h, w], &mut rng);
    let m_tilde = random(&[2, h, w], &mut rng).scale(0.1);
    let y = crate::operators::simulate_measurement(&f, &ctx.op, &NoiseModel::none()).unwrap();
    TrainingSample {
        g,
        y,
        f,
        m_tilde,
        t0: None,
    }
}

#[test]
fn douglas_rachford_reaches_quadratic_minimiser() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let psi = PsiSolver::new(Arc::new(ForwardOperator::identity(8, 8)));
    for (kappa, rho) in [(1.0, 0.5), (3.0, 0.2), (0.5, 0.7)] {
        let y = random(&[8, 8], &mut rng);
        let z = random(&[8, 8], &mut rng);
        let prox = QuadraticProx { z: z.clone(), kappa, rho };
        let minimiser = y.add(&z.scale(kappa)).unwrap().scale(1.0 / (1.0 + kappa));
        let (gv, yv, rv) = (
            Var::constant(Tensor::zeros(&[8, 8])),
            Var::constant(y),
            Var::constant(Tensor::scalar(rho)),
        );
        let mut s = DRState::initial(Var::constant(random(&[8, 8], &mut rng)));
        for _ in 0..200 {
            s = stage_forward(&s, &gv, &yv, &prox, &psi, &rv).unwrap();
        }
        assert!(s.f.value().max_abs_diff(&minimiser).unwrap() < 1e-6);
        assert!(s.u.value().max_abs_diff(&minimiser).unwrap() < 1e-6);
    }
}

#[test]
fn single_stage_loss_counts_final_term_twice() {
    let f = Tensor::zeros(&[2, 2]);
    let u = Var::constant(Tensor::full(&[2, 2], 1.0));
    let mut s1 = DRState::initial(u.clone());
    s1.k = 1;
    s1.m = Some(Var::constant(Tensor::ones(&[2, 2, 2])));
    let states = vec![DRState::initial(u), s1];
    let cfg = LossConfig {
        alpha: vec![1.0],
        beta: vec![0.0],
    };
    let terms = cfg.evaluate(&states, &f, &Tensor::zeros(&[2, 2, 2])).unwrap();
    assert_eq!(terms.value(), 8.0);
    assert_eq!(terms.momentum_terms, 0.0);
}

#[test]
fn exact_prediction_has_zero_loss() {
    let f = Tensor::full(&[3, 3], 0.3);
    let m = Tensor::full(&[2, 3, 3], -0.2);
    let mut s = DRState::initial(Var::constant(f.clone()));
    s.m = Some(Var::constant(m.clone()));
    let states = vec![s.clone(), s.clone(), s];
    let cfg = LossConfig::geometric(2);
    assert_eq!(cfg.evaluate(&states, &f, &m).unwrap().value(), 0.0);
    assert_eq!(cfg.alpha, vec![0.5, 1.0]);
}

#[test]
fn loss_weights_are_validated() {
    assert!(LossConfig {
        alpha: vec![1.0, 0.0],
        beta: vec![0.0, 0.0]
    }
    .validate(2)
    .is_err());
    assert!(LossConfig {
        alpha: vec![-1.0, 1.0],
        beta: vec![0.0, 0.0]
    }
    .validate(2)
    .is_err());
    assert!(LossConfig::geometric(3).validate(3).is_ok());
}

#[test]
fn one_stage_pipeline_gradient_matches_finite_differences() {
    let cfg = tiny_config(1);
    let ctx = Context::new(cfg.clone()).unwrap();
    let mut model = Model::init(&cfg, 5).unwrap();
    // A non-zero residual head so every layer carries gradient.
    let n1 = model.stages[0].net.theta1.len();
    let mut tensors = model.stage_tensors(0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r3 = tensors.len() - 3;
    tensors[r3] = Tensor::from_fn(tensors[r3].shape(), |_| rng.random_range(-0.3..0.3));
    model.set_stage_tensors(0, &tensors).unwrap();

    let s = sample(&ctx, 3);
    let t0 = s.initial(&ctx).unwrap();
    let loss_cfg = LossConfig {
        alpha: vec![1.0],
        beta: vec![0.5],
    };
    let loss_of = |model: &Model| {
        let vars = vec![StageVars::new(&model.stages[0], true)];
        let states = pipeline_forward(&ctx, model, &vars, &s.g, &s.y, &t0).unwrap();
        (loss_cfg.evaluate(&states, &s.f, &s.m_tilde).unwrap(), vars)
    };
    let (terms, vars) = loss_of(&model);
    let grads = terms.total.backward().unwrap();
    let all = vars[0].all();

    // (tensor index, element index) probes across both nets and w.
    let probes = [(0, 5), (2, 17), (n1 - 2, 3), (n1, 11), (r3, 20), (r3 + 1, 0), (tensors.len() - 1, 0)];
    let h = 1e-5;
    for (ti, ei) in probes {
        let analytic = grads.get_or_zeros(&all[ti]).data()[ei];
        let eval = |delta: f64| {
            let mut m = model.clone();
            let mut ts = m.stage_tensors(0);
            ts[ti].data_mut()[ei] += delta;
            m.set_stage_tensors(0, &ts).unwrap();
            loss_of(&m).0.value()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-3, "probe ({ti},{ei}): analytic {analytic} numeric {numeric}");
    }
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let cfg = tiny_config(2);
    let ctx = Context::new(cfg.clone()).unwrap();
    let mut model = Model::init(&cfg, 1).unwrap();
    let before = model.clone();
    let samples: Vec<TrainingSample> = (0..3).map(|i| sample(&ctx, i)).collect();
    let tc = TrainConfig {
        pretrain_epochs: 1,
        joint_epochs: 2,
        batch_size: 2,
        adam: AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        },
    };
    let report = train(&ctx, &mut model, &samples, &LossConfig::geometric(2), &tc).unwrap();
    assert_eq!(model, before);
    assert_eq!(report.history.epochs.len(), 2 + 2);
    assert_eq!(report.optimizer.step, 2 * 2);
}

#[test]
fn training_lowers_the_loss_and_keeps_rho_in_range() {
    let cfg = tiny_config(2);
    let ctx = Context::new(cfg.clone()).unwrap();
    let mut model = Model::init(&cfg, 2).unwrap();
    let samples: Vec<TrainingSample> = (0..4).map(|i| sample(&ctx, 10 + i)).collect();
    let loss_cfg = LossConfig::geometric(2);
    let before = evaluate_loss(&ctx, &model, &samples, &loss_cfg).unwrap();
    let tc = TrainConfig {
        pretrain_epochs: 0,
        joint_epochs: 15,
        batch_size: 4,
        adam: AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        },
    };
    let report = train(&ctx, &mut model, &samples, &loss_cfg, &tc).unwrap();
    let after = evaluate_loss(&ctx, &model, &samples, &loss_cfg).unwrap();
    assert!(after < before, "{after} >= {before}");
    for r in &report.history.epochs {
        assert!(r.rhos.iter().all(|&p| p > 0.0 && p < 0.8));
    }
    assert!(report.history.to_csv().starts_with("phase,stages,epoch,loss"));
}

#[test]
fn non_finite_loss_names_stage_and_sample() {
    let cfg = tiny_config(1);
    let ctx = Context::new(cfg.clone()).unwrap();
    let mut model = Model::init(&cfg, 1).unwrap();
    let mut samples: Vec<TrainingSample> = (0..3).map(|i| sample(&ctx, i)).collect();
    samples[2].f.data_mut()[0] = f64::NAN;
    let tc = TrainConfig {
        pretrain_epochs: 0,
        joint_epochs: 1,
        ..TrainConfig::default()
    };
    match train(&ctx, &mut model, &samples, &LossConfig::geometric(1), &tc) {
        Err(Error::NonFiniteLoss { stage: 1, sample: 2 }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn zero_momentum_shoot_warp_returns_template() {
    let ctx = Context::new(tiny_config(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = random(&[8, 8], &mut rng);
    let u = shoot_warp(&g, &Tensor::zeros(&[2, 8, 8]), &ctx.kernel, &ctx.cfg.integrator).unwrap();
    assert_eq!(u, g);
}

#[test]
fn inference_modes_share_shape_and_repeat_bitwise() {
    let cfg = tiny_config(2);
    let ctx = Context::new(cfg.clone()).unwrap();
    let model = Model::init(&cfg, 3).unwrap();
    let s = sample(&ctx, 8);
    let t0 = s.initial(&ctx).unwrap();
    let a = infer(&ctx, &model, &s.g, &s.y, &t0, InferMode::NetOutput).unwrap();
    let b = infer(&ctx, &model, &s.g, &s.y, &t0, InferMode::ShootWarp).unwrap();
    assert_eq!(a.u.shape(), b.u.shape());
    assert_eq!(a.m, b.m);
    assert_eq!(a.stage_images.len(), 2);
    let again = infer(&ctx, &model, &s.g, &s.y, &t0, InferMode::NetOutput).unwrap();
    assert_eq!(a.u, again.u);
}

#[test]
fn one_stage_pipeline_is_one_stage_forward() {
    let cfg = tiny_config(1);
    let ctx = Context::new(cfg.clone()).unwrap();
    let model = Model::init(&cfg, 6).unwrap();
    let s = sample(&ctx, 1);
    let t0 = s.initial(&ctx).unwrap();
    let states = run_pipeline(&ctx, &model, &s.g, &s.y, &t0).unwrap();
    let sv = StageVars::new(&model.stages[0], false);
    let phi = LearnedPhi {
        net: &model.stages[0].net,
        kernel: &ctx.kernel,
        theta1: &sv.theta1,
        theta2: &sv.theta2,
    };
    let rho = crate::inversion::RhoParam::realize(&sv.w, cfg.rho_cap);
    let direct = stage_forward(
        &DRState::initial(Var::constant(t0)),
        &Var::constant(s.g.clone()),
        &Var::constant(s.y.clone()),
        &phi,
        &ctx.psi,
        &rho,
    )
    .unwrap();
    assert_eq!(states[1].t.value(), direct.t.value());
}

#[test]
fn model_and_optimizer_checkpoints_roundtrip() {
    let cfg = tiny_config(2);
    let model = Model::init(&cfg, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path(), &cfg).unwrap();
    let (back, cfg_back) = Model::load(dir.path()).unwrap();
    assert_eq!(back, model);
    assert_eq!(cfg_back, cfg);

    let params = model.stage_tensors(0);
    let mut adam = Adam::new(AdamConfig::default(), &params);
    let mut p = params.clone();
    adam.update(&mut p, &params).unwrap();
    adam.save(dir.path(), "adam").unwrap();
    assert_eq!(Adam::load(dir.path(), "adam").unwrap(), adam);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut p = vec![Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
    let g = vec![Tensor::new(&[3], vec![4.0, -0.01, 0.0]).unwrap()];
    let mut adam = Adam::new(AdamConfig::default(), &p);
    adam.update(&mut p, &g).unwrap();
    let d = p[0].data();
    assert!((d[0] - (1.0 - 1e-4)).abs() < 1e-9);
    assert!((d[1] - (-2.0 + 1e-4)).abs() < 1e-8);
    assert_eq!(d[2], 0.5);
}
