use std::sync::Arc;

use rustfft::num_complex::Complex64;

use crate::diff::Var;
use crate::error::{Error, Result};
use crate::fft::{signed_freq, Fft2};
use crate::tensor::Tensor;

/// Smoothing kernel `K` and regularisation weight `γ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelConfig {
    /// Gaussian standard deviation in pixels.
    pub sigma: f64,
    pub gamma: f64,
}

impl KernelConfig {
    /// Default kernel for an `h × w` grid: `σ = 0.05·min(h, w)`, `γ = 1`.
    pub fn for_grid(h: usize, w: usize) -> Self {
        KernelConfig {
            sigma: 0.05 * h.min(w) as f64,
            gamma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::config(format!("invalid kernel {self:?}")));
        }
        Ok(())
    }
}

/// Periodic Gaussian convolution applied in frequency space.
///
/// The symbol is the continuous Gaussian transform sampled at the DFT
/// frequencies, which is real, even and equal to 1 at DC.
#[derive(Clone, Debug)]
pub struct GaussianKernel {
    cfg: KernelConfig,
    fft: Fft2,
    symbol: Arc<Vec<f64>>,
}

impl GaussianKernel {
    pub fn new(cfg: KernelConfig, h: usize, w: usize) -> Result<Self> {
        cfg.validate()?;
        let s2 = 2.0 * std::f64::consts::PI.powi(2) * cfg.sigma * cfg.sigma;
        let symbol = (0..h * w)
            .map(|k| {
                let ky = signed_freq(k / w, h) as f64 / h as f64;
                let kx = signed_freq(k % w, w) as f64 / w as f64;
                (-s2 * (kx * kx + ky * ky)).exp()
            })
            .collect();
        Ok(GaussianKernel {
            cfg,
            fft: Fft2::new(h, w),
            symbol: Arc::new(symbol),
        })
    }

    pub fn config(&self) -> &KernelConfig {
        &self.cfg
    }

    pub fn grid(&self) -> (usize, usize) {
        self.fft.dims()
    }

    fn smooth_plane(&self, plane: &[f64], out: &mut [f64]) {
        let mut buf: Vec<Complex64> = plane.iter().map(|&a| Complex64::new(a, 0.0)).collect();
        self.fft.forward(&mut buf);
        for (b, &s) in buf.iter_mut().zip(self.symbol.iter()) {
            *b *= s;
        }
        self.fft.inverse(&mut buf);
        for (o, b) in out.iter_mut().zip(&buf) {
            *o = b.re;
        }
    }

    /// Smooths every `H × W` plane of `m` (shape `[.., H, W]`).
    pub fn apply(&self, m: &Tensor) -> Result<Tensor> {
        let (h, w) = self.grid();
        let shape = m.shape();
        if shape.len() < 2 || shape[shape.len() - 2..] != [h, w] {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected trailing grid {h}x{w}"),
            });
        }
        let mut out = Tensor::zeros(shape);
        let plane = h * w;
        for (src, dst) in m.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
            self.smooth_plane(src, dst);
        }
        Ok(out)
    }

    /// Differentiable [`GaussianKernel::apply`]; the operator is self-adjoint.
    pub fn apply_var(&self, m: &Var) -> Result<Var> {
        let k = self.clone();
        m.linear_map(|x| self.apply(x), move |up| k.apply(up))
    }

    /// `⟨m, K m⟩`.
    pub fn energy(&self, m: &Tensor) -> Result<f64> {
        m.dot(&self.apply(m)?)
    }
}
