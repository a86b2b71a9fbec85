//! The `sofpidr` command line: run configuration and the six subcommands.
//!
//! Everything lives under the output directory:
//! `data/` (dataset), `model/` (checkpoint, optimiser state, history),
//! `infer/` and `baseline/` (reconstructions and timings) and `eval/`
//! (`metrics.csv` and PNG previews).

mod check;

pub use check::{self_tests, CheckResult};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::{join_list, KeyValue};
use crate::error::{Error, Result};
use crate::eval::{error_map, error_map_legend, write_png, MetricReport, ERROR_MAP_GAIN};
use crate::inversion::tv_reconstruct;
use crate::jrrt;
use crate::lddmm::{lddmm_register, warp, Boundary, RegisterOptions, VariationalWeights};
use crate::phantoms::{build_dataset, load_dataset, DatasetManifest, Modality};
use crate::pipeline::{infer, train, Context, InferMode, LossConfig, Model, PipelineConfig, TrainConfig, TrainingSample};
use crate::tensor::Tensor;

/// Subcommand names.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Infer,
    Eval,
    Baseline,
    Check,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Infer => "infer",
            Command::Eval => "eval",
            Command::Baseline => "baseline",
            Command::Check => "check",
        })
    }
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gen-data" => Command::GenData,
            "train" => Command::Train,
            "infer" => Command::Infer,
            "eval" => Command::Eval,
            "baseline" => Command::Baseline,
            "check" => Command::Check,
            _ => return Err(Error::config(format!("unknown command '{s}'"))),
        })
    }
}

/// Every setting of a run, stored as `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Option<Command>,
    pub modality: Modality,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub noise_sigma: f64,
    /// Peak contraction of the phantom motion.
    pub amplitude: f64,
    /// Registration used for ground-truth momenta and the baseline.
    pub sigma_reg: f64,
    pub register_iters: usize,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Fill the `seconds` column of `metrics.csv`.
    pub record_timing: bool,
}

impl RunConfig {
    pub fn new(modality: Modality, h: usize, w: usize) -> Self {
        let data = DatasetManifest::new(modality, 60, 8, h, w, 0);
        let mut pipeline = PipelineConfig::new(h, w);
        pipeline.operator = modality.default_operator();
        let loss = LossConfig::geometric(pipeline.stages);
        RunConfig {
            command: None,
            modality,
            n_train: data.n_train,
            n_test: data.n_test,
            seed: 0,
            out: PathBuf::from("run"),
            noise_sigma: data.noise_sigma,
            amplitude: data.amplitude,
            sigma_reg: data.weights.sigma_reg,
            register_iters: data.register.max_iters,
            pipeline,
            train: TrainConfig::default(),
            loss,
            record_timing: false,
        }
    }

    pub fn to_kv(&self) -> KeyValue {
        let mut kv = KeyValue::new();
        if let Some(c) = self.command {
            kv.set("command", c);
        }
        kv.set("modality", self.modality);
        kv.set("n_train", self.n_train);
        kv.set("n_test", self.n_test);
        kv.set("seed", self.seed);
        kv.set("out", self.out.display());
        kv.set("noise_sigma", self.noise_sigma);
        kv.set("amplitude", self.amplitude);
        kv.set("sigma_reg", self.sigma_reg);
        kv.set("register_iters", self.register_iters);
        self.pipeline.write_kv(&mut kv);
        kv.set("pretrain_epochs", self.train.pretrain_epochs);
        kv.set("joint_epochs", self.train.joint_epochs);
        kv.set("batch_size", self.train.batch_size);
        kv.set("lr", self.train.adam.lr);
        kv.set("beta1", self.train.adam.beta1);
        kv.set("beta2", self.train.adam.beta2);
        kv.set("adam_eps", self.train.adam.eps);
        kv.set("loss_alpha", join_list(&self.loss.alpha));
        kv.set("loss_beta", join_list(&self.loss.beta));
        kv.set("record_timing", self.record_timing);
        kv
    }

    /// Reads a configuration; missing keys take the modality defaults.
    pub fn from_kv(kv: &KeyValue) -> Result<Self> {
        let modality: Modality = kv.get_or("modality", Modality::Mri)?;
        let mut pipeline = PipelineConfig::from_kv(kv)?;
        if !kv.contains("operator") {
            pipeline.operator = modality.default_operator();
        }
        let d = RunConfig::new(modality, pipeline.h, pipeline.w);
        let dt = d.train;
        let loss = if kv.contains("loss_alpha") || kv.contains("loss_beta") {
            LossConfig {
                alpha: kv.get_list("loss_alpha")?,
                beta: kv.get_list("loss_beta")?,
            }
        } else {
            LossConfig::geometric(pipeline.stages)
        };
        let cfg = RunConfig {
            command: if kv.contains("command") { Some(kv.get("command")?) } else { None },
            modality,
            n_train: kv.get_or("n_train", d.n_train)?,
            n_test: kv.get_or("n_test", d.n_test)?,
            seed: kv.get_or("seed", d.seed)?,
            out: PathBuf::from(kv.raw("out").unwrap_or("run")),
            noise_sigma: kv.get_or("noise_sigma", d.noise_sigma)?,
            amplitude: kv.get_or("amplitude", d.amplitude)?,
            sigma_reg: kv.get_or("sigma_reg", d.sigma_reg)?,
            register_iters: kv.get_or("register_iters", d.register_iters)?,
            pipeline,
            train: TrainConfig {
                pretrain_epochs: kv.get_or("pretrain_epochs", dt.pretrain_epochs)?,
                joint_epochs: kv.get_or("joint_epochs", dt.joint_epochs)?,
                batch_size: kv.get_or("batch_size", dt.batch_size)?,
                adam: crate::pipeline::AdamConfig {
                    lr: kv.get_or("lr", dt.adam.lr)?,
                    beta1: kv.get_or("beta1", dt.adam.beta1)?,
                    beta2: kv.get_or("beta2", dt.adam.beta2)?,
                    eps: kv.get_or("adam_eps", dt.adam.eps)?,
                },
            },
            loss,
            record_timing: kv.get_or("record_timing", false)?,
        };
        cfg.loss.validate(cfg.pipeline.stages)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KeyValue::load(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_kv().save(path)
    }

    /// The dataset this run generates.
    pub fn dataset_manifest(&self) -> DatasetManifest {
        let p = &self.pipeline;
        let mut m = DatasetManifest::new(self.modality, self.n_train, self.n_test, p.h, p.w, self.seed);
        m.operator = p.operator;
        m.noise_sigma = self.noise_sigma;
        m.amplitude = self.amplitude;
        m.kernel = p.kernel;
        m.integrator = p.integrator;
        m.weights.sigma_reg = self.sigma_reg;
        m.register.max_iters = self.register_iters;
        m
    }

    pub fn registration_weights(&self) -> VariationalWeights {
        VariationalWeights {
            sigma_reg: self.sigma_reg,
            ..VariationalWeights::default()
        }
    }

    pub fn register_options(&self) -> RegisterOptions {
        RegisterOptions {
            max_iters: self.register_iters,
            ..RegisterOptions::default()
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }
    pub fn model_dir(&self) -> PathBuf {
        self.out.join("model")
    }
    pub fn infer_dir(&self) -> PathBuf {
        self.out.join("infer")
    }
    pub fn baseline_dir(&self) -> PathBuf {
        self.out.join("baseline")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }
}

#[derive(Parser, Debug)]
#[command(name = "sofpidr", about = "Unrolled Douglas-Rachford reconstruction with learned registration")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Generate phantom pairs, measurements and ground-truth momenta.
    GenData(Common),
    /// Train the unrolled network on the generated dataset.
    Train(Common),
    /// Reconstruct every test sample in both inference modes.
    Infer(Common),
    /// Score reconstructions and write metrics and previews.
    Eval(Common),
    /// Run the sequential TV then LDDMM comparator.
    Baseline(Common),
    /// Run the self-test battery.
    Check(Common),
}

fn resolve(command: Command, common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new(Modality::Mri, 64, 64),
    };
    cfg.command = Some(command);
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `gen-data`: builds the dataset under `out/data`.
pub fn gen_data(cfg: &RunConfig) -> Result<DatasetManifest> {
    let dir = cfg.data_dir();
    mkdir(&cfg.out)?;
    cfg.save(cfg.out.join("run.txt"))?;
    let man = build_dataset(&cfg.dataset_manifest(), &dir)?;
    let redrawn = man.samples.iter().filter(|s| s.attempts > 1).count();
    log::info!("wrote {} samples to {} ({redrawn} redrawn)", man.len(), dir.display());
    Ok(man)
}

fn check_dataset(cfg: &RunConfig, man: &DatasetManifest) -> Result<()> {
    if (man.h, man.w) != (cfg.pipeline.h, cfg.pipeline.w) || man.operator != cfg.pipeline.operator {
        return Err(Error::config("dataset grid or operator differs from the run configuration"));
    }
    Ok(())
}

/// `train`: fits a fresh model and writes the checkpoint under `out/model`.
pub fn train_command(cfg: &RunConfig) -> Result<Model> {
    let ds = load_dataset(cfg.data_dir())?;
    check_dataset(cfg, &ds.manifest)?;
    let ctx = Context::new(cfg.pipeline.clone())?;
    let mut model = Model::init(&cfg.pipeline, cfg.seed)?;
    let samples: Vec<TrainingSample> = ds
        .train
        .iter()
        .map(|s| Ok(TrainingSample { t0: Some(ctx.initial(&s.y)?), ..s.clone() }))
        .collect::<Result<_>>()?;
    let report = train(&ctx, &mut model, &samples, &cfg.loss, &cfg.train)?;
    let dir = cfg.model_dir();
    model.save(&dir, &cfg.pipeline)?;
    report.optimizer.save(&dir, "adam")?;
    report.history.save(dir.join("history.csv"))?;
    cfg.save(dir.join("run.txt"))?;
    if let Some(last) = report.history.epochs.last() {
        log::info!("final training loss {:.6e}, rho {:?}", last.loss, last.rhos);
    }
    Ok(model)
}

fn recon_path(dir: &Path, idx: usize, method: &str) -> PathBuf {
    dir.join(format!("recon_{idx}_{method}.jrrt"))
}

fn write_timing(path: &Path, rows: &[(usize, String, f64)]) -> Result<()> {
    let mut s = String::from("sample,method,seconds\n");
    for (i, m, t) in rows {
        s.push_str(&format!("{i},{m},{t:.6}\n"));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_timing(path: &Path) -> Result<Vec<(usize, String, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        let bad = || Error::config(format!("malformed timing line '{line}'"));
        if parts.len() != 3 {
            return Err(bad());
        }
        out.push((
            parts[0].parse().map_err(|_| bad())?,
            parts[1].to_string(),
            parts[2].parse().map_err(|_| bad())?,
        ));
    }
    Ok(out)
}

/// Indices and samples of the test split.
fn test_samples(cfg: &RunConfig) -> Result<Vec<(usize, TrainingSample)>> {
    let ds = load_dataset(cfg.data_dir())?;
    check_dataset(cfg, &ds.manifest)?;
    Ok(ds.manifest.indices(crate::phantoms::Split::Test).zip(ds.test).collect())
}

/// Mean seconds per call of `run` over `samples`, after one untimed warm-up.
fn timed<T>(samples: &[(usize, TrainingSample)], mut run: impl FnMut(&TrainingSample) -> Result<T>) -> Result<Vec<(T, f64)>> {
    if let Some((_, s)) = samples.first() {
        run(s)?;
    }
    samples
        .iter()
        .map(|(_, s)| {
            let t = Instant::now();
            let out = run(s)?;
            Ok((out, t.elapsed().as_secs_f64()))
        })
        .collect()
}

/// `infer`: both inference modes on every test sample, from the measurement
/// alone (initialisation included in the timing).
pub fn infer_command(cfg: &RunConfig) -> Result<()> {
    let (model, pcfg) = Model::load(cfg.model_dir())?;
    let ctx = Context::new(pcfg)?;
    let samples = test_samples(cfg)?;
    let dir = cfg.infer_dir();
    mkdir(&dir)?;
    let mut timing = Vec::new();
    for mode in [InferMode::NetOutput, InferMode::ShootWarp] {
        let results = timed(&samples, |s| {
            let t0 = ctx.initial(&s.y)?;
            infer(&ctx, &model, &s.g, &s.y, &t0, mode)
        })?;
        for ((idx, _), (res, secs)) in samples.iter().zip(results) {
            jrrt::write(recon_path(&dir, *idx, &mode.to_string()), &res.u)?;
            if mode == InferMode::NetOutput {
                jrrt::write(dir.join(format!("momentum_{idx}.jrrt")), &res.m)?;
            }
            timing.push((*idx, mode.to_string(), secs));
        }
    }
    write_timing(&dir.join("timing.csv"), &timing)
}

/// Sequential comparator: TV reconstruction, then registration of the
/// template onto it; returns `(tv, g∘φ)`.
pub fn tv_lddmm(cfg: &RunConfig, ctx: &Context, s: &TrainingSample) -> Result<(Tensor, Tensor)> {
    let tv = tv_reconstruct(&s.y, &ctx.op, &ctx.cfg.tv)?;
    let reg = lddmm_register(
        &tv,
        &s.g,
        &cfg.registration_weights(),
        &ctx.kernel,
        &ctx.cfg.integrator,
        &cfg.register_options(),
    )?;
    let warped = warp(&s.g, &reg.phi, Boundary::Zero)?;
    Ok((tv, warped))
}

/// `baseline`: TV and TV+LDDMM reconstructions of every test sample, scored
/// against the targets.
pub fn baseline_command(cfg: &RunConfig) -> Result<MetricReport> {
    let ctx = Context::new(cfg.pipeline.clone())?;
    let samples = test_samples(cfg)?;
    let dir = cfg.baseline_dir();
    mkdir(&dir)?;
    let results = timed(&samples, |s| tv_lddmm(cfg, &ctx, s))?;
    let tv_times = timed(&samples, |s| tv_reconstruct(&s.y, &ctx.op, &ctx.cfg.tv))?;
    let mut timing = Vec::new();
    let mut report = MetricReport::default();
    for (((idx, s), ((tv, warped), secs)), (_, tv_secs)) in samples.iter().zip(results).zip(tv_times) {
        jrrt::write(recon_path(&dir, *idx, "tv"), &tv)?;
        jrrt::write(recon_path(&dir, *idx, "tv-lddmm"), &warped)?;
        timing.push((*idx, "tv".to_string(), tv_secs));
        timing.push((*idx, "tv-lddmm".to_string(), secs));
        report.push(*idx, "tv", &tv, &s.f, None)?;
        report.push(*idx, "tv-lddmm", &warped, &s.f, None)?;
    }
    report.save(dir.join("metrics.csv"))?;
    write_timing(&dir.join("timing.csv"), &timing)?;
    Ok(report)
}

/// Reconstruction methods in report order with the directory holding them.
const METHODS: [(&str, &str); 4] = [("tv", "baseline"), ("tv-lddmm", "baseline"), ("net-output", "infer"), ("shoot-warp", "infer")];

/// `eval`: metrics for every reconstruction present, plus PNG previews.
pub fn eval_command(cfg: &RunConfig) -> Result<MetricReport> {
    let samples = test_samples(cfg)?;
    let dir = cfg.eval_dir();
    mkdir(&dir)?;
    let mut timing = Vec::new();
    if cfg.record_timing {
        for sub in ["baseline", "infer"] {
            let p = cfg.out.join(sub).join("timing.csv");
            if p.exists() {
                timing.extend(read_timing(&p)?);
            }
        }
    }
    let mut report = MetricReport::default();
    for (idx, s) in &samples {
        write_png(dir.join(format!("target_{idx}.png")), &s.f)?;
        for (method, sub) in METHODS {
            let path = recon_path(&cfg.out.join(sub), *idx, method);
            if !path.exists() {
                continue;
            }
            let u = jrrt::read(&path)?;
            let secs = timing.iter().find(|(i, m, _)| i == idx && m == method).map(|t| t.2);
            report.push(*idx, method, &u, &s.f, secs)?;
            write_png(dir.join(format!("recon_{idx}_{method}.png")), &u)?;
            write_png(dir.join(format!("err_{idx}_{method}.png")), &error_map(&u, &s.f, ERROR_MAP_GAIN)?)?;
        }
    }
    if report.rows.is_empty() {
        return Err(Error::config("no reconstructions found; run infer or baseline first"));
    }
    report.save(dir.join("metrics.csv"))?;
    println!("{}", error_map_legend(ERROR_MAP_GAIN));
    for m in report.methods() {
        let (p, q, _) = report.mean(&m).expect("present");
        println!("{m:>12}: PSNR {p:.2} dB  SSIM {q:.4}");
    }
    Ok(report)
}

/// `check`: prints one line per self-test; true when all pass.
pub fn check_command() -> bool {
    let results = self_tests();
    for r in &results {
        println!("{} {} ({})", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    results.iter().all(|r| r.passed)
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 on success, 1 when a self-test fails, 2 on usage
/// errors. Other failures are returned as errors.
pub fn run_command<I, T>(argv: I) -> Result<i32>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return Ok(code);
        }
    };
    match cli.command {
        Sub::GenData(c) => gen_data(&resolve(Command::GenData, &c)?).map(|_| 0),
        Sub::Train(c) => train_command(&resolve(Command::Train, &c)?).map(|_| 0),
        Sub::Infer(c) => infer_command(&resolve(Command::Infer, &c)?).map(|_| 0),
        Sub::Eval(c) => eval_command(&resolve(Command::Eval, &c)?).map(|_| 0),
        Sub::Baseline(c) => baseline_command(&resolve(Command::Baseline, &c)?).map(|_| 0),
        Sub::Check(c) => {
            resolve(Command::Check, &c)?;
            Ok(if check_command() { 0 } else { 1 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_roundtrips() {
        let mut cfg = RunConfig::new(Modality::CtLowdose, 32, 32);
        cfg.command = Some(Command::Train);
        cfg.seed = 17;
        cfg.train.joint_epochs = 3;
        cfg.loss.beta = vec![0.0, 0.1, 0.2];
        cfg.record_timing = true;
        cfg.pipeline.rho_init = vec![0.5, 0.4, 0.3];
        let text = cfg.to_kv().to_string();
        let back = RunConfig::from_kv(&KeyValue::parse(&text).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn modality_picks_the_operator() {
        let kv = KeyValue::parse("modality = ct-sparse\nheight = 32\nwidth = 32").unwrap();
        let cfg = RunConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.pipeline.operator, crate::operators::OperatorSpec::RayTransform { views: 18 });
        assert_eq!(cfg.noise_sigma, 0.0);
        assert_eq!(cfg.dataset_manifest().operator, cfg.pipeline.operator);
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run_command(["sofpidr", "nonsense"]).unwrap(), 2);
        assert_eq!(run_command(["sofpidr", "train", "--bogus"]).unwrap(), 2);
    }

    #[test]
    fn missing_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("nothing");
        assert!(run_command(["sofpidr", "train", "--out", out.to_str().unwrap()]).is_err());
        assert!(run_command(["sofpidr", "eval", "--config", "/no/such/file.txt"]).is_err());
    }
}
