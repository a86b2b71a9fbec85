//! 2-D cross-correlation with zero padding (im2col + GEMM).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Var;

pub fn conv_out_extent(n: usize, k: usize, stride: usize, padding: usize) -> usize {
    (n + 2 * padding - k) / stride + 1
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        let (cin, h, w) = (input[0], input[1], input[2]);
        let (cout, kc, k) = (kernel[0], kernel[1], kernel[2]);
        if kc != cin || kernel[3] != k {
            return Err(Error::ShapeMismatch {
                op: "conv2d channels",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        if k % 2 == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::InvalidShape {
                shape: kernel.to_vec(),
                reason: format!("kernel must be odd and fit the padded input (stride {stride}, pad {pad})"),
            });
        }
        Ok(Geometry {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho: conv_out_extent(h, k, stride, pad),
            wo: conv_out_extent(w, k, stride, pad),
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for output `(oi, oj)` and kernel tap `(ki, kj)`.
    #[inline]
    fn source(&self, oi: usize, oj: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let i = (oi * self.stride + ki) as isize - self.pad as isize;
        let j = (oj * self.stride + kj) as isize - self.pad as isize;
        if i < 0 || j < 0 || i >= self.h as isize || j >= self.w as isize {
            None
        } else {
            Some((i as usize, j as usize))
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.cols();
        let mut cols = vec![0.0; self.rows() * n];
        for c in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oi in 0..self.ho {
                        for oj in 0..self.wo {
                            if let Some((i, j)) = self.source(oi, oj, ki, kj) {
                                dst[oi * self.wo + oj] = x[(c * self.h + i) * self.w + j];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let n = self.cols();
        let mut x = vec![0.0; self.cin * self.h * self.w];
        for c in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    for oi in 0..self.ho {
                        for oj in 0..self.wo {
                            if let Some((i, j)) = self.source(oi, oj, ki, kj) {
                                x[(c * self.h + i) * self.w + j] += src[oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// `c[m x n] = a[m x k] * b[k x n]` with optional transposes (row-major storage).
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the bounds above cover every index touched by the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain forward convolution of `[C_in, H, W]` by `[C_out, C_in, k, k]`.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = Geometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let cols = g.im2col(input.data());
    let mut out = vec![0.0; g.cout * g.cols()];
    gemm(g.cout, g.rows(), g.cols(), kernel.data(), false, &cols, false, &mut out);
    Tensor::new(&[g.cout, g.ho, g.wo], out)
}

impl Var {
    /// Cross-correlation of `[C_in, H, W]` with `[C_out, C_in, k, k]`,
    /// differentiable in both arguments.
    pub fn conv2d(&self, kernel: &Var, stride: usize, padding: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(), kernel.value(), stride, padding)?;
        Ok(Var::from_op(
            out,
            vec![self.clone(), kernel.clone()],
            Box::new(move |p, _, up| {
                let (x, kern) = (p[0].value(), p[1].value());
                let g = Geometry::new(x.shape(), kern.shape(), stride, padding)?;
                let dx = if p[0].requires_grad() {
                    let mut dcols = vec![0.0; g.rows() * g.cols()];
                    gemm(g.rows(), g.cout, g.cols(), kern.data(), true, up.data(), false, &mut dcols);
                    Some(Tensor::new(x.shape(), g.col2im(&dcols))?)
                } else {
                    None
                };
                let dk = if p[1].requires_grad() {
                    let cols = g.im2col(x.data());
                    let mut dk = vec![0.0; g.cout * g.rows()];
                    gemm(g.cout, g.cols(), g.rows(), up.data(), false, &cols, true, &mut dk);
                    Some(Tensor::new(kern.shape(), dk)?)
                } else {
                    None
                };
                Ok(vec![dx, dk])
            }),
        ))
    }
}
