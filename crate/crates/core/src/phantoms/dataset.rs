use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{join_list, KeyValue};
use crate::error::{Error, Result};
use crate::jrrt;
use crate::lddmm::{
    epdiff_shoot, lddmm_register, warp, Boundary, GaussianKernel, IntegratorConfig, KernelConfig, RegisterOptions,
    Scheme, VariationalWeights,
};
use crate::operators::{simulate_measurement, MaskPattern, NoiseModel, OperatorSpec};
use crate::pipeline::TrainingSample;
use crate::tensor::Tensor;

use super::{make_pair, DeformSpec, PhantomSpec};

/// Imaging scenario with its default operator and noise level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    /// Radially undersampled Fourier data, `σ = 0.05`.
    Mri,
    /// 18-view noiseless ray transform.
    CtSparse,
    /// 181-view ray transform, `σ = 0.10`.
    CtLowdose,
}

impl Modality {
    pub fn default_operator(self) -> OperatorSpec {
        match self {
            Modality::Mri => OperatorSpec::MaskedFourier {
                pattern: MaskPattern::Radial,
                rate: 0.25,
                center: 4,
                seed: 0,
                complex_domain: false,
            },
            Modality::CtSparse => OperatorSpec::RayTransform { views: 18 },
            Modality::CtLowdose => OperatorSpec::RayTransform { views: 181 },
        }
    }

    pub fn default_noise(self) -> f64 {
        match self {
            Modality::Mri => 0.05,
            Modality::CtSparse => 0.0,
            Modality::CtLowdose => 0.10,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Mri => "mri",
            Modality::CtSparse => "ct-sparse",
            Modality::CtLowdose => "ct-lowdose",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mri" => Ok(Modality::Mri),
            "ct-sparse" => Ok(Modality::CtSparse),
            "ct-lowdose" => Ok(Modality::CtLowdose),
            _ => Err(Error::config(format!("unknown modality '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split '{s}'"))),
        }
    }
}

/// One written sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleEntry {
    pub idx: usize,
    pub split: Split,
    /// Generation attempts; more than one means earlier draws were rejected.
    pub attempts: usize,
    /// `‖g∘φ − f‖² / ‖g − f‖²` for the stored momentum.
    pub residual_ratio: f64,
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub modality: Modality,
    pub n_train: usize,
    pub n_test: usize,
    pub h: usize,
    pub w: usize,
    pub operator: OperatorSpec,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Peak contraction of the phantom motion.
    pub amplitude: f64,
    pub kernel: KernelConfig,
    pub integrator: IntegratorConfig,
    pub weights: VariationalWeights,
    pub register: RegisterOptions,
    /// Rejection threshold on the stored-momentum residual ratio.
    pub max_residual: f64,
    pub max_attempts: usize,
    /// Filled in by [`build_dataset`].
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn new(modality: Modality, n_train: usize, n_test: usize, h: usize, w: usize, seed: u64) -> Self {
        DatasetManifest {
            modality,
            n_train,
            n_test,
            h,
            w,
            operator: modality.default_operator(),
            noise_sigma: modality.default_noise(),
            seed,
            amplitude: 0.2,
            kernel: KernelConfig::for_grid(h, w),
            integrator: IntegratorConfig::default(),
            weights: VariationalWeights {
                sigma_reg: 0.03,
                ..VariationalWeights::default()
            },
            register: RegisterOptions::default(),
            max_residual: 0.1,
            max_attempts: 8,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.n_train + self.n_test
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn split_of(&self, idx: usize) -> Split {
        if idx < self.n_train {
            Split::Train
        } else {
            Split::Test
        }
    }

    pub fn indices(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.n_train,
            Split::Test => self.n_train..self.len(),
        }
    }

    pub fn to_kv(&self) -> KeyValue {
        let mut kv = KeyValue::new();
        kv.set("modality", self.modality);
        kv.set("n_train", self.n_train);
        kv.set("n_test", self.n_test);
        kv.set("height", self.h);
        kv.set("width", self.w);
        self.operator.write_kv(&mut kv);
        kv.set("noise_sigma", self.noise_sigma);
        kv.set("seed", self.seed);
        kv.set("amplitude", self.amplitude);
        kv.set("kernel_sigma", self.kernel.sigma);
        kv.set("gamma", self.kernel.gamma);
        kv.set("steps", self.integrator.steps);
        kv.set("squarings", self.integrator.squarings);
        kv.set("sigma_reg", self.weights.sigma_reg);
        kv.set("register_iters", self.register.max_iters);
        kv.set("register_tolerance", self.register.rel_tolerance);
        kv.set("max_residual", self.max_residual);
        kv.set("max_attempts", self.max_attempts);
        for s in &self.samples {
            kv.set(
                &format!("sample.{}", s.idx),
                join_list(&[s.split.to_string(), s.attempts.to_string(), format!("{:e}", s.residual_ratio)]),
            );
        }
        kv
    }

    /// Reads a manifest; generation keys other than the grid, counts and
    /// operator fall back to the modality defaults.
    pub fn from_kv(kv: &KeyValue) -> Result<Self> {
        let modality: Modality = kv.get("modality")?;
        let mut m = DatasetManifest::new(
            modality,
            kv.get("n_train")?,
            kv.get("n_test")?,
            kv.get("height")?,
            kv.get("width")?,
            kv.get_or("seed", 0)?,
        );
        if kv.contains("operator") {
            m.operator = OperatorSpec::from_kv(kv)?;
        }
        m.noise_sigma = kv.get_or("noise_sigma", m.noise_sigma)?;
        m.amplitude = kv.get_or("amplitude", m.amplitude)?;
        m.kernel.sigma = kv.get_or("kernel_sigma", m.kernel.sigma)?;
        m.kernel.gamma = kv.get_or("gamma", m.kernel.gamma)?;
        m.integrator.steps = kv.get_or("steps", m.integrator.steps)?;
        m.integrator.squarings = kv.get_or("squarings", m.integrator.squarings)?;
        m.weights.sigma_reg = kv.get_or("sigma_reg", m.weights.sigma_reg)?;
        m.register.max_iters = kv.get_or("register_iters", m.register.max_iters)?;
        m.register.rel_tolerance = kv.get_or("register_tolerance", m.register.rel_tolerance)?;
        m.max_residual = kv.get_or("max_residual", m.max_residual)?;
        m.max_attempts = kv.get_or("max_attempts", m.max_attempts)?;
        for idx in 0..m.len() {
            let key = format!("sample.{idx}");
            if kv.contains(&key) {
                let parts: Vec<String> = kv.get_list(&key)?;
                if parts.len() != 3 {
                    return Err(Error::config(format!("malformed '{key}'")));
                }
                m.samples.push(SampleEntry {
                    idx,
                    split: parts[0].parse()?,
                    attempts: parts[1].parse().map_err(|_| Error::config(format!("malformed '{key}'")))?,
                    residual_ratio: parts[2].parse().map_err(|_| Error::config(format!("malformed '{key}'")))?,
                });
            }
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::config("dataset needs at least one sample"));
        }
        if !(self.noise_sigma >= 0.0 && self.amplitude >= 0.0 && self.max_residual > 0.0) || self.max_attempts == 0 {
            return Err(Error::config("invalid dataset manifest"));
        }
        self.kernel.validate()?;
        if self.integrator.scheme != Scheme::EulerEpdiff {
            return Err(Error::config("ground-truth momenta need the EPDiff integrator"));
        }
        self.integrator.validate()?;
        self.weights.validate()
    }
}

fn file(dir: &Path, idx: usize, part: &str) -> std::path::PathBuf {
    dir.join(format!("sample_{idx}_{part}.jrrt"))
}

/// A generated sample before it is written.
struct Generated {
    g: Tensor,
    f: Tensor,
    y: Tensor,
    m: Tensor,
    residual_ratio: f64,
}

fn sample_rng(seed: u64, idx: usize, attempt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((idx as u64) << 16) | attempt as u64);
    rng
}

fn generate(
    man: &DatasetManifest,
    op: &crate::operators::ForwardOperator,
    kernel: &GaussianKernel,
    idx: usize,
    attempt: usize,
) -> Result<Generated> {
    let mut rng = sample_rng(man.seed, idx, attempt);
    let spec = PhantomSpec::random(man.h, man.w, man.seed, &mut rng);
    let deform = DeformSpec::random(man.h, man.w, man.amplitude, man.seed, &mut rng);
    // Template near rest, target near peak contraction.
    let p_g = (1.0 - deform.phase + rng.random_range(-0.05..0.05)).rem_euclid(1.0);
    let p_f = (p_g + 0.5 + rng.random_range(-0.05..0.05)).rem_euclid(1.0);
    let (g, f) = make_pair(&spec, &deform, (p_g, p_f))?;
    let noise = NoiseModel::for_operator(op.kind(), man.noise_sigma, rng.random());
    let y = simulate_measurement(&f, op, &noise)?;
    let reg = lddmm_register(&f, &g, &man.weights, kernel, &man.integrator, &man.register)?;
    let traj = epdiff_shoot(&reg.momentum, kernel, &man.integrator)?;
    let warped = warp(&g, &traj.phi, Boundary::Zero)?;
    let base = g.sub(&f)?.norm_sq();
    let residual_ratio = if base == 0.0 {
        0.0
    } else {
        warped.sub(&f)?.norm_sq() / base
    };
    Ok(Generated {
        g,
        f,
        y,
        m: reg.momentum,
        residual_ratio,
    })
}

/// Generates every sample into `dir`, writes `manifest.txt` last and returns
/// the completed manifest. Samples whose stored momentum fails to reproduce
/// the pair are redrawn from a fresh stream.
pub fn build_dataset(manifest: &DatasetManifest, dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    manifest.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let op = manifest.operator.build(manifest.h, manifest.w)?;
    let kernel = GaussianKernel::new(manifest.kernel, manifest.h, manifest.w)?;
    let mut out = manifest.clone();
    out.samples.clear();
    for idx in 0..manifest.len() {
        let mut accepted = None;
        for attempt in 0..manifest.max_attempts {
            match generate(manifest, &op, &kernel, idx, attempt) {
                Ok(s) if s.residual_ratio <= manifest.max_residual && s.y.is_finite() => {
                    accepted = Some((s, attempt + 1));
                    break;
                }
                Ok(s) => log::warn!(
                    "sample {idx} attempt {attempt}: momentum residual ratio {:.3} rejected",
                    s.residual_ratio
                ),
                Err(e) => log::warn!("sample {idx} attempt {attempt}: registration failed: {e}"),
            }
        }
        let (s, attempts) = accepted.ok_or_else(|| {
            Error::config(format!("sample {idx}: no acceptable pair in {} attempts", manifest.max_attempts))
        })?;
        jrrt::write(file(dir, idx, "g"), &s.g)?;
        jrrt::write(file(dir, idx, "f"), &s.f)?;
        jrrt::write(file(dir, idx, "y"), &s.y)?;
        jrrt::write(file(dir, idx, "m"), &s.m)?;
        log::info!("sample {idx}: residual ratio {:.4}", s.residual_ratio);
        out.samples.push(SampleEntry {
            idx,
            split: manifest.split_of(idx),
            attempts,
            residual_ratio: s.residual_ratio,
        });
    }
    out.to_kv().save(dir.join("manifest.txt"))?;
    Ok(out)
}

/// A dataset read back from disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<TrainingSample>,
    pub test: Vec<TrainingSample>,
}

/// Loads any directory holding `manifest.txt` and `sample_<idx>_{g,f,y,m}.jrrt`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = DatasetManifest::from_kv(&KeyValue::load(dir.join("manifest.txt"))?)?;
    let (h, w) = (manifest.h, manifest.w);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for idx in 0..manifest.len() {
        let g = jrrt::read(file(dir, idx, "g"))?;
        let f = jrrt::read(file(dir, idx, "f"))?;
        let m_tilde = jrrt::read(file(dir, idx, "m"))?;
        g.expect_shape(&[h, w], "load_dataset")?;
        f.expect_shape(&[h, w], "load_dataset")?;
        m_tilde.expect_shape(&[2, h, w], "load_dataset")?;
        let sample = TrainingSample {
            g,
            y: jrrt::read(file(dir, idx, "y"))?,
            f,
            m_tilde,
            t0: None,
        };
        match manifest.split_of(idx) {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    Ok(Dataset { manifest, train, test })
}
