use crate::tensor::Tensor;

/// Parallel-beam ray transform discretised with Joseph's method.
///
/// Each ray steps one pixel at a time along its dominant axis and linearly
/// interpolates across the other, weighting by the step length. The weights
/// are stored as a sparse matrix so the adjoint is its exact transpose.
#[derive(Clone, Debug)]
pub struct RayTransform {
    pub(super) h: usize,
    pub(super) w: usize,
    pub(super) n_views: usize,
    pub(super) n_det: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

/// Detector count covering the image diagonal.
pub fn detector_count(h: usize, w: usize) -> usize {
    (std::f64::consts::SQRT_2 * h.max(w) as f64).ceil() as usize
}

impl RayTransform {
    /// `n_views` angles spread uniformly over 360 degrees.
    pub fn new(h: usize, w: usize, n_views: usize) -> Self {
        let n_det = detector_count(h, w);
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for v in 0..n_views {
            let theta = 2.0 * std::f64::consts::PI * v as f64 / n_views as f64;
            let (dy, dx) = theta.sin_cos();
            let (nx, ny) = (-dy, dx);
            for d in 0..n_det {
                let s = d as f64 - (n_det as f64 - 1.0) / 2.0;
                let mut push = |row: isize, col: isize, wgt: f64| {
                    if wgt != 0.0 && row >= 0 && col >= 0 && (row as usize) < h && (col as usize) < w {
                        cols.push((row as usize * w + col as usize) as u32);
                        vals.push(wgt);
                    }
                };
                if dx.abs() >= dy.abs() {
                    let step = 1.0 / dx.abs();
                    for j in 0..w {
                        let x = j as f64 - cx;
                        let tau = (x - s * nx) / dx;
                        let yi = s * ny + tau * dy + cy;
                        let i0 = yi.floor();
                        let frac = yi - i0;
                        push(i0 as isize, j as isize, (1.0 - frac) * step);
                        push(i0 as isize + 1, j as isize, frac * step);
                    }
                } else {
                    let step = 1.0 / dy.abs();
                    for i in 0..h {
                        let y = i as f64 - cy;
                        let tau = (y - s * ny) / dy;
                        let xj = s * nx + tau * dx + cx;
                        let j0 = xj.floor();
                        let frac = xj - j0;
                        push(i as isize, j0 as isize, (1.0 - frac) * step);
                        push(i as isize, j0 as isize + 1, frac * step);
                    }
                }
                row_ptr.push(cols.len());
            }
        }
        RayTransform {
            h,
            w,
            n_views,
            n_det,
            row_ptr,
            cols,
            vals,
        }
    }

    pub(super) fn apply(&self, x: &Tensor) -> Tensor {
        let xd = x.data();
        let out: Vec<f64> = (0..self.n_views * self.n_det)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .map(|k| self.vals[k] * xd[self.cols[k] as usize])
                    .sum()
            })
            .collect();
        Tensor::new(&[self.n_views, self.n_det], out).expect("sinogram shape")
    }

    pub(super) fn adjoint(&self, y: &Tensor) -> Tensor {
        let yd = y.data();
        let mut out = vec![0.0; self.h * self.w];
        for (r, &yr) in yd.iter().enumerate() {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.cols[k] as usize] += self.vals[k] * yr;
            }
        }
        Tensor::new(&[self.h, self.w], out).expect("image shape")
    }

    /// Upper bound on `‖A‖²` from the row and column sums (Schur test).
    pub fn norm_sq_bound(&self) -> f64 {
        let mut col_sum = vec![0.0; self.h * self.w];
        let mut row_max: f64 = 0.0;
        for r in 0..self.n_views * self.n_det {
            let mut s = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.vals[k].abs();
                col_sum[self.cols[k] as usize] += self.vals[k].abs();
            }
            row_max = row_max.max(s);
        }
        row_max * col_sum.iter().cloned().fold(0.0, f64::max)
    }
}
