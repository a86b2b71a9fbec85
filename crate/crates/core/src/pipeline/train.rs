use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::KeyValue;
use crate::error::{Error, Result};
use crate::jrrt;
use crate::tensor::Tensor;

use super::model::{pipeline_forward, Context, LossConfig, Model, StageVars};

/// One supervised example.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub g: Tensor,
    pub y: Tensor,
    pub f: Tensor,
    pub m_tilde: Tensor,
    /// Cached `t⁰`; computed from `y` when absent.
    pub t0: Option<Tensor>,
}

impl TrainingSample {
    pub fn initial(&self, ctx: &Context) -> Result<Tensor> {
        match &self.t0 {
            Some(t) => Ok(t.clone()),
            None => ctx.initial(&self.y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over an ordered list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[Tensor]) -> Self {
        Adam {
            cfg,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::config("Adam parameter count changed"));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            g.same_shape(p, "adam")?;
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>, prefix: &str) -> Result<()> {
        let dir = dir.as_ref();
        let mut kv = KeyValue::new();
        kv.set("step", self.step);
        kv.set("lr", self.cfg.lr);
        kv.set("beta1", self.cfg.beta1);
        kv.set("beta2", self.cfg.beta2);
        kv.set("eps", self.cfg.eps);
        kv.set("tensors", self.m.len());
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            jrrt::write(dir.join(format!("{prefix}_m{i}.jrrt")), m)?;
            jrrt::write(dir.join(format!("{prefix}_v{i}.jrrt")), v)?;
        }
        kv.save(dir.join(format!("{prefix}.txt")))
    }

    pub fn load(dir: impl AsRef<Path>, prefix: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let kv = KeyValue::load(dir.join(format!("{prefix}.txt")))?;
        let n: usize = kv.get("tensors")?;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            m.push(jrrt::read(dir.join(format!("{prefix}_m{i}.jrrt")))?);
            v.push(jrrt::read(dir.join(format!("{prefix}_v{i}.jrrt")))?);
        }
        Ok(Adam {
            cfg: AdamConfig {
                lr: kv.get("lr")?,
                beta1: kv.get("beta1")?,
                beta2: kv.get("beta2")?,
                eps: kv.get("eps")?,
            },
            step: kv.get("step")?,
            m,
            v,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Epochs of stage-wise pretraining per stage.
    pub pretrain_epochs: usize,
    /// Epochs of joint training of all stages.
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_epochs: 10,
            joint_epochs: 20,
            batch_size: 4,
            adam: AdamConfig::default(),
        }
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// `pretrain` or `joint`.
    pub phase: &'static str,
    /// Number of active stages.
    pub stages: usize,
    pub epoch: usize,
    /// Mean loss over samples, evaluated during the epoch.
    pub loss: f64,
    pub final_term: f64,
    pub image_terms: f64,
    pub momentum_terms: f64,
    pub rhos: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,stages,epoch,loss,final_term,image_terms,momentum_terms,rhos\n");
        for r in &self.epochs {
            let rhos: Vec<String> = r.rhos.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(
                s,
                "{},{},{},{:.9e},{:.9e},{:.9e},{:.9e},{}",
                r.phase,
                r.stages,
                r.epoch,
                r.loss,
                r.final_term,
                r.image_terms,
                r.momentum_terms,
                rhos.join(";")
            );
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn check_sample(ctx: &Context, s: &TrainingSample) -> Result<()> {
    let grid = [ctx.cfg.h, ctx.cfg.w];
    s.g.expect_shape(&grid, "training sample g")?;
    s.f.expect_shape(&grid, "training sample f")?;
    s.m_tilde.expect_shape(&[2, ctx.cfg.h, ctx.cfg.w], "training sample m")?;
    s.y.expect_shape(&ctx.op.range_shape(), "training sample y")
}

/// Trains stages `0..active` with only those in `trainable` updated.
#[allow(clippy::too_many_arguments)]
fn run_phase(
    ctx: &Context,
    model: &mut Model,
    samples: &[TrainingSample],
    t0s: &[Tensor],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    active: usize,
    trainable: &[usize],
    phase: &'static str,
    epochs: usize,
    history: &mut History,
) -> Result<Adam> {
    let initial: Vec<Tensor> = trainable.iter().flat_map(|&k| model.stage_tensors(k)).collect();
    let mut adam = Adam::new(cfg.adam, &initial);
    let truncated = LossConfig {
        alpha: loss_cfg.alpha[..active].to_vec(),
        beta: loss_cfg.beta[..active].to_vec(),
    };
    for epoch in 0..epochs {
        let (mut total, mut fin, mut img, mut mom) = (0.0, 0.0, 0.0, 0.0);
        for (b, batch) in samples.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut acc: Option<Vec<Tensor>> = None;
            for (j, s) in batch.iter().enumerate() {
                let idx = b * cfg.batch_size.max(1) + j;
                let vars: Vec<StageVars> = (0..active)
                    .map(|k| StageVars::new(&model.stages[k], trainable.contains(&k)))
                    .collect();
                let states = pipeline_forward(ctx, model, &vars, &s.g, &s.y, &t0s[idx])?;
                let terms = truncated.evaluate(&states, &s.f, &s.m_tilde)?;
                let value = terms.value();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        stage: active,
                        sample: idx,
                    });
                }
                total += value;
                fin += terms.final_term;
                img += terms.image_terms;
                mom += terms.momentum_terms;
                let grads = terms.total.backward()?;
                let g: Vec<Tensor> = trainable
                    .iter()
                    .flat_map(|&k| vars[k].all())
                    .map(|v| grads.get_or_zeros(&v))
                    .collect();
                if g.iter().any(|t| !t.is_finite()) {
                    return Err(Error::NonFiniteLoss {
                        stage: active,
                        sample: idx,
                    });
                }
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&g) {
                            x.add_assign(y)?;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = acc.unwrap_or_default().into_iter().map(|t| t.scale(scale)).collect();
            let mut params: Vec<Tensor> = trainable.iter().flat_map(|&k| model.stage_tensors(k)).collect();
            adam.update(&mut params, &grads)?;
            let mut offset = 0;
            for &k in trainable {
                let n = model.stage_tensors(k).len();
                model.set_stage_tensors(k, &params[offset..offset + n])?;
                offset += n;
            }
        }
        let n = samples.len() as f64;
        let rec = EpochRecord {
            phase,
            stages: active,
            epoch,
            loss: total / n,
            final_term: fin / n,
            image_terms: img / n,
            momentum_terms: mom / n,
            rhos: model.rhos(),
        };
        log::info!("{phase} stages={active} epoch={epoch} loss={:.6e} rho={:?}", rec.loss, rec.rhos);
        history.epochs.push(rec);
    }
    Ok(adam)
}

/// Training history and the optimiser state of the joint phase.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub history: History,
    pub optimizer: Adam,
}

/// Stage-wise pretraining (stage `k` trained with stages before it frozen,
/// against the loss truncated at `k`) followed by joint training.
pub fn train(
    ctx: &Context,
    model: &mut Model,
    samples: &[TrainingSample],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let n = model.stages.len();
    loss_cfg.validate(n)?;
    if samples.is_empty() {
        return Err(Error::config("no training samples"));
    }
    for s in samples {
        check_sample(ctx, s)?;
    }
    let t0s: Vec<Tensor> = samples.iter().map(|s| s.initial(ctx)).collect::<Result<_>>()?;
    let mut history = History::default();
    if cfg.pretrain_epochs > 0 {
        for k in 0..n {
            run_phase(
                ctx,
                model,
                samples,
                &t0s,
                loss_cfg,
                cfg,
                k + 1,
                &[k],
                "pretrain",
                cfg.pretrain_epochs,
                &mut history,
            )?;
        }
    }
    let all: Vec<usize> = (0..n).collect();
    let optimizer = run_phase(ctx, model, samples, &t0s, loss_cfg, cfg, n, &all, "joint", cfg.joint_epochs, &mut history)?;
    Ok(TrainReport { history, optimizer })
}

/// Mean loss of the full pipeline over `samples` without training.
pub fn evaluate_loss(ctx: &Context, model: &Model, samples: &[TrainingSample], loss_cfg: &LossConfig) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let vars: Vec<StageVars> = model.stages.iter().map(|p| StageVars::new(p, false)).collect();
        let states = pipeline_forward(ctx, model, &vars, &s.g, &s.y, &s.initial(ctx)?)?;
        total += loss_cfg.evaluate(&states, &s.f, &s.m_tilde)?.value();
    }
    Ok(total / samples.len().max(1) as f64)
}
