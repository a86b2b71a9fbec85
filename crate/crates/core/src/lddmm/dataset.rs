//! Momentum datasets: `pair_<idx>_{f,g,m}.jrrt` plus a `manifest.txt`.

use std::fs;
use std::path::Path;

use crate::config::KeyValue;
use crate::error::{Error, Result};
use crate::jrrt;
use crate::tensor::Tensor;

use super::kernel::KernelConfig;
use super::register::VariationalWeights;
use super::shoot::IntegratorConfig;

/// Settings shared by every pair of a momentum dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MomentumManifest {
    pub h: usize,
    pub w: usize,
    pub count: usize,
    pub kernel: KernelConfig,
    pub integrator: IntegratorConfig,
    pub weights: VariationalWeights,
}

impl MomentumManifest {
    pub fn to_kv(&self) -> KeyValue {
        let mut kv = KeyValue::new();
        kv.set("height", self.h);
        kv.set("width", self.w);
        kv.set("count", self.count);
        kv.set("kernel_sigma", self.kernel.sigma);
        kv.set("gamma", self.kernel.gamma);
        kv.set("steps", self.integrator.steps);
        kv.set("scheme", self.integrator.scheme);
        kv.set("squarings", self.integrator.squarings);
        kv.set("sigma_reg", self.weights.sigma_reg);
        kv.set("lambda", self.weights.lambda);
        kv.set("mu", self.weights.mu);
        kv
    }

    pub fn from_kv(kv: &KeyValue) -> Result<Self> {
        Ok(MomentumManifest {
            h: kv.get("height")?,
            w: kv.get("width")?,
            count: kv.get("count")?,
            kernel: KernelConfig {
                sigma: kv.get("kernel_sigma")?,
                gamma: kv.get("gamma")?,
            },
            integrator: IntegratorConfig {
                steps: kv.get("steps")?,
                scheme: kv.get("scheme")?,
                squarings: kv.get("squarings")?,
            },
            weights: VariationalWeights {
                lambda: kv.get("lambda")?,
                sigma_reg: kv.get("sigma_reg")?,
                mu: kv.get("mu")?,
            },
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.to_kv().save(dir.join("manifest.txt"))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&KeyValue::load(dir.as_ref().join("manifest.txt"))?)
    }
}

/// One registered pair: image `f`, template `g` and momentum `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumPair {
    pub f: Tensor,
    pub g: Tensor,
    pub m: Tensor,
}

pub fn write_pair(dir: impl AsRef<Path>, idx: usize, pair: &MomentumPair) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    jrrt::write(dir.join(format!("pair_{idx}_f.jrrt")), &pair.f)?;
    jrrt::write(dir.join(format!("pair_{idx}_g.jrrt")), &pair.g)?;
    jrrt::write(dir.join(format!("pair_{idx}_m.jrrt")), &pair.m)
}

pub fn read_pair(dir: impl AsRef<Path>, idx: usize) -> Result<MomentumPair> {
    let dir = dir.as_ref();
    Ok(MomentumPair {
        f: jrrt::read(dir.join(format!("pair_{idx}_f.jrrt")))?,
        g: jrrt::read(dir.join(format!("pair_{idx}_g.jrrt")))?,
        m: jrrt::read(dir.join(format!("pair_{idx}_m.jrrt")))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let man = MomentumManifest {
            h: 4,
            w: 5,
            count: 1,
            kernel: KernelConfig { sigma: 0.2, gamma: 1.5 },
            integrator: IntegratorConfig::default(),
            weights: VariationalWeights::default(),
        };
        man.save(dir.path()).unwrap();
        assert_eq!(MomentumManifest::load(dir.path()).unwrap(), man);
        let pair = MomentumPair {
            f: Tensor::from_fn(&[4, 5], |k| k as f64 / 7.0),
            g: Tensor::zeros(&[4, 5]),
            m: Tensor::from_fn(&[2, 4, 5], |k| -(k as f64) / 3.0),
        };
        write_pair(dir.path(), 3, &pair).unwrap();
        assert_eq!(read_pair(dir.path(), 3).unwrap(), pair);
    }
}
