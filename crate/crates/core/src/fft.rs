//! Orthonormal 2-D DFT on row-major complex buffers.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct Fft2 {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2({}x{})", self.h, self.w)
    }
}

impl Fft2 {
    pub fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn run(&self, buf: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.h, self.w);
        assert_eq!(buf.len(), h * w);
        let (rows, cols) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        rows.process(buf);
        let mut col = vec![Complex64::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                col[i] = buf[i * w + j];
            }
            cols.process(&mut col);
            for i in 0..h {
                buf[i * w + j] = col[i];
            }
        }
        let s = 1.0 / ((h * w) as f64).sqrt();
        for v in buf.iter_mut() {
            *v *= s;
        }
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, false);
    }

    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, true);
    }
}

/// Signed frequency of FFT bin `i` on an axis of length `n`.
pub fn signed_freq(i: usize, n: usize) -> isize {
    if i < n.div_ceil(2) {
        i as isize
    } else {
        i as isize - n as isize
    }
}

pub fn to_complex(re: &[f64], im: Option<&[f64]>) -> Vec<Complex64> {
    match im {
        Some(im) => re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect(),
        None => re.iter().map(|&a| Complex64::new(a, 0.0)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_roundtrip() {
        let f = Fft2::new(4, 6);
        let orig: Vec<Complex64> = (0..24).map(|i| Complex64::new(i as f64, -(i as f64) / 3.0)).collect();
        let mut buf = orig.clone();
        f.forward(&mut buf);
        let energy: f64 = buf.iter().map(|c| c.norm_sqr()).sum();
        let energy0: f64 = orig.iter().map(|c| c.norm_sqr()).sum();
        assert!((energy - energy0).abs() < 1e-9 * energy0);
        f.inverse(&mut buf);
        for (a, b) in buf.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn frequencies() {
        assert_eq!(signed_freq(3, 8), 3);
        assert_eq!(signed_freq(4, 8), -4);
        assert_eq!(signed_freq(2, 5), 2);
        assert_eq!(signed_freq(3, 5), -2);
    }
}
