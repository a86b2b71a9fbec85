use std::fs;
use std::path::Path;

use rand::Rng;

use crate::config::{join_list, KeyValue};
use crate::diff::Var;
use crate::error::{Error, Result};
use crate::jrrt;
use crate::tensor::Tensor;

/// One convolution layer of a declared architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn new(name: &str, c_in: usize, c_out: usize, stride: usize) -> Self {
        ConvSpec {
            name: name.to_string(),
            c_in,
            c_out,
            kernel: 3,
            stride,
        }
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kernel, self.kernel]
    }
}

/// Ordered named parameter tensors of one network at one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct NetWeights {
    pub stage: usize,
    params: Vec<(String, Tensor)>,
}

impl NetWeights {
    pub fn new(stage: usize, params: Vec<(String, Tensor)>) -> Self {
        NetWeights { stage, params }
    }

    /// Uniform fan-in initialisation `U(−√(6/fan_in), √(6/fan_in))` for
    /// kernels and zero biases. Layers listed in `zero_layers` start at zero.
    pub fn init(layers: &[ConvSpec], stage: usize, zero_layers: &[&str], rng: &mut impl Rng) -> Self {
        let mut params = Vec::new();
        for l in layers {
            let shape = l.kernel_shape();
            let kernel = if zero_layers.contains(&l.name.as_str()) {
                Tensor::zeros(&shape)
            } else {
                let fan_in = (l.c_in * l.kernel * l.kernel) as f64;
                let b = (6.0 / fan_in).sqrt();
                Tensor::from_fn(&shape, |_| rng.random_range(-b..b))
            };
            params.push((format!("{}.w", l.name), kernel));
            params.push((format!("{}.b", l.name), Tensor::zeros(&[l.c_out])));
        }
        NetWeights { stage, params }
    }

    pub fn zeros(layers: &[ConvSpec], stage: usize) -> Self {
        let mut params = Vec::new();
        for l in layers {
            params.push((format!("{}.w", l.name), Tensor::zeros(&l.kernel_shape())));
            params.push((format!("{}.b", l.name), Tensor::zeros(&[l.c_out])));
        }
        NetWeights { stage, params }
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::config(format!("missing parameter '{name}'")))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks names and shapes against `layers`.
    pub fn check(&self, layers: &[ConvSpec]) -> Result<()> {
        if self.params.len() != 2 * layers.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, found {}",
                2 * layers.len(),
                self.params.len()
            )));
        }
        for (l, pair) in layers.iter().zip(self.params.chunks(2)) {
            let (wn, w) = &pair[0];
            let (bn, b) = &pair[1];
            if *wn != format!("{}.w", l.name) || *bn != format!("{}.b", l.name) {
                return Err(Error::config(format!("parameter order mismatch at layer {}", l.name)));
            }
            w.expect_shape(&l.kernel_shape(), "NetWeights::check")?;
            b.expect_shape(&[l.c_out], "NetWeights::check")?;
        }
        Ok(())
    }

    /// Parameters as graph inputs; `trainable` selects leaves or constants.
    pub fn to_vars(&self, trainable: bool) -> NetVars {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| {
                let v = if trainable { Var::leaf(t.clone()) } else { Var::constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        NetVars { vars }
    }

    /// Writes `<prefix>_<name>.jrrt` per parameter plus `<prefix>_manifest.txt`.
    pub fn save(&self, dir: impl AsRef<Path>, prefix: &str, arch: &KeyValue) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut kv = KeyValue::new();
        kv.set("stage", self.stage);
        kv.merge(arch);
        kv.set("params", join_list(&self.params.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>()));
        for (n, t) in &self.params {
            kv.set(&format!("shape.{n}"), join_list(t.shape()));
            jrrt::write(dir.join(format!("{prefix}_{n}.jrrt")), t)?;
        }
        kv.save(dir.join(format!("{prefix}_manifest.txt")))
    }

    /// Reads weights written by [`NetWeights::save`], with the manifest.
    pub fn load(dir: impl AsRef<Path>, prefix: &str) -> Result<(Self, KeyValue)> {
        let dir = dir.as_ref();
        let kv = KeyValue::load(dir.join(format!("{prefix}_manifest.txt")))?;
        let names: Vec<String> = kv.get_list("params")?;
        let mut params = Vec::new();
        for n in names {
            let t = jrrt::read(dir.join(format!("{prefix}_{n}.jrrt")))?;
            let shape: Vec<usize> = kv.get_list(&format!("shape.{n}"))?;
            t.expect_shape(&shape, "NetWeights::load")?;
            params.push((n, t));
        }
        Ok((
            NetWeights {
                stage: kv.get("stage")?,
                params,
            },
            kv,
        ))
    }
}

/// Parameters of one network as graph variables, in declaration order.
#[derive(Clone, Debug)]
pub struct NetVars {
    vars: Vec<(String, Var)>,
}

impl NetVars {
    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::config(format!("missing parameter '{name}'")))
    }

    pub fn vars(&self) -> impl Iterator<Item = &Var> {
        self.vars.iter().map(|(_, v)| v)
    }

    /// Applies layer `spec` with padding 1: convolution plus bias.
    pub fn conv(&self, x: &Var, spec: &ConvSpec) -> Result<Var> {
        let w = self.get(&format!("{}.w", spec.name))?;
        let b = self.get(&format!("{}.b", spec.name))?;
        x.conv2d(w, spec.stride, spec.kernel / 2)?.add_channel_bias(b)
    }
}
