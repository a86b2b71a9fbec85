use rustfft::num_complex::Complex64;

use crate::error::Result;
use crate::fft::{signed_freq, to_complex, Fft2};
use crate::tensor::Tensor;

use super::mask::SamplingMask;

/// Masked orthonormal DFT. The measurement is always `[2, H, W]`
/// (real, imaginary); the image is `[H, W]` real or `[2, H, W]` complex.
#[derive(Clone, Debug)]
pub struct MaskedFourier {
    pub(super) mask: SamplingMask,
    pub(super) complex_domain: bool,
    fft: Fft2,
}

impl MaskedFourier {
    pub fn new(mask: SamplingMask, complex_domain: bool) -> Self {
        let fft = Fft2::new(mask.h, mask.w);
        MaskedFourier {
            mask,
            complex_domain,
            fft,
        }
    }

    fn plane(&self) -> usize {
        self.mask.h * self.mask.w
    }

    pub(super) fn domain_shape(&self) -> Vec<usize> {
        if self.complex_domain {
            vec![2, self.mask.h, self.mask.w]
        } else {
            vec![self.mask.h, self.mask.w]
        }
    }

    pub(super) fn range_shape(&self) -> Vec<usize> {
        vec![2, self.mask.h, self.mask.w]
    }

    fn pack(&self, buf: &[Complex64]) -> Tensor {
        let n = self.plane();
        let mut data = vec![0.0; 2 * n];
        for (k, c) in buf.iter().enumerate() {
            data[k] = c.re;
            data[n + k] = c.im;
        }
        Tensor::new(&[2, self.mask.h, self.mask.w], data).expect("packed shape")
    }

    /// Masked transform of a complex image given as separate planes.
    pub fn forward_complex(&self, re: &[f64], im: Option<&[f64]>) -> Tensor {
        let mut buf = to_complex(re, im);
        self.fft.forward(&mut buf);
        for (c, &m) in buf.iter_mut().zip(self.mask.bits()) {
            if !m {
                *c = Complex64::new(0.0, 0.0);
            }
        }
        self.pack(&buf)
    }

    pub(super) fn apply(&self, x: &Tensor) -> Tensor {
        let n = self.plane();
        if self.complex_domain {
            self.forward_complex(&x.data()[..n], Some(&x.data()[n..]))
        } else {
            self.forward_complex(x.data(), None)
        }
    }

    pub(super) fn adjoint(&self, y: &Tensor) -> Tensor {
        let n = self.plane();
        let mut buf = to_complex(&y.data()[..n], Some(&y.data()[n..]));
        for (c, &m) in buf.iter_mut().zip(self.mask.bits()) {
            if !m {
                *c = Complex64::new(0.0, 0.0);
            }
        }
        self.fft.inverse(&mut buf);
        if self.complex_domain {
            self.pack(&buf)
        } else {
            Tensor::new(&[self.mask.h, self.mask.w], buf.iter().map(|c| c.re).collect()).expect("image shape")
        }
    }

    /// Fourier-domain multiplier of `AᵀA`. For a real image the real-part
    /// projection symmetrises the mask: `(M(k) + M(-k)) / 2`.
    pub fn normal_symbol(&self) -> Vec<f64> {
        let (h, w) = (self.mask.h, self.mask.w);
        let bits = self.mask.bits();
        (0..h * w)
            .map(|k| {
                let m = if bits[k] { 1.0 } else { 0.0 };
                if self.complex_domain {
                    m
                } else {
                    let (i, j) = (k / w, k % w);
                    let ni = (-signed_freq(i, h)).rem_euclid(h as isize) as usize;
                    let nj = (-signed_freq(j, w)).rem_euclid(w as isize) as usize;
                    let mm = if bits[ni * w + nj] { 1.0 } else { 0.0 };
                    0.5 * (m + mm)
                }
            })
            .collect()
    }

    /// Solves `(AᵀA + ρI) x = b` exactly by diagonalising in frequency.
    pub fn solve_shifted(&self, b: &Tensor, rho: f64) -> Result<Tensor> {
        let n = self.plane();
        let mut buf = if self.complex_domain {
            to_complex(&b.data()[..n], Some(&b.data()[n..]))
        } else {
            to_complex(b.data(), None)
        };
        self.fft.forward(&mut buf);
        for (c, s) in buf.iter_mut().zip(self.normal_symbol()) {
            *c /= s + rho;
        }
        self.fft.inverse(&mut buf);
        if self.complex_domain {
            Ok(self.pack(&buf))
        } else {
            Tensor::new(b.shape(), buf.iter().map(|c| c.re).collect())
        }
    }
}
