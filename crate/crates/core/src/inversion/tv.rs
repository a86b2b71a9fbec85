//! Isotropic TV-regularised least squares by primal-dual iterations:
//! `min_u ½‖Au − y‖² + α TV(u)`.

use crate::error::{Error, Result};
use crate::operators::ForwardOperator;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TvConfig {
    pub alpha: f64,
    pub iters: usize,
    /// Primal step; `None` picks `0.99 / ‖K‖`.
    pub tau: Option<f64>,
    /// Dual step; `None` picks `0.99 / ‖K‖`.
    pub sigma: Option<f64>,
}

impl Default for TvConfig {
    fn default() -> Self {
        TvConfig {
            alpha: 0.03,
            iters: 100,
            tau: None,
            sigma: None,
        }
    }
}

/// Forward differences with a zero difference across the last row/column.
/// `u` is `[C, H, W]` flattened into planes; output is `(gx, gy)`.
fn gradient(u: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; u.len()];
    let mut gy = vec![0.0; u.len()];
    for c in 0..planes {
        let o = c * h * w;
        for i in 0..h {
            for j in 0..w {
                let k = o + i * w + j;
                if j + 1 < w {
                    gx[k] = u[k + 1] - u[k];
                }
                if i + 1 < h {
                    gy[k] = u[k + w] - u[k];
                }
            }
        }
    }
    (gx, gy)
}

/// Negative adjoint of [`gradient`].
fn divergence(px: &[f64], py: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut d = vec![0.0; px.len()];
    for c in 0..planes {
        let o = c * h * w;
        for i in 0..h {
            for j in 0..w {
                let k = o + i * w + j;
                let mut v = 0.0;
                if j + 1 < w {
                    v += px[k];
                }
                if j > 0 {
                    v -= px[k - 1];
                }
                if i + 1 < h {
                    v += py[k];
                }
                if i > 0 {
                    v -= py[k - w];
                }
                d[k] = v;
            }
        }
    }
    d
}

fn layout(op: &ForwardOperator) -> (usize, usize, usize) {
    let d = op.domain_shape();
    let (h, w) = op.grid();
    let planes = if d.len() == 3 { d[0] } else { 1 };
    (planes, h, w)
}

/// Isotropic total variation, channels coupled in the pointwise norm.
pub fn total_variation(u: &Tensor, planes: usize, h: usize, w: usize) -> f64 {
    let (gx, gy) = gradient(u.data(), planes, h, w);
    let plane = h * w;
    (0..plane)
        .map(|k| {
            (0..planes)
                .map(|c| gx[c * plane + k].powi(2) + gy[c * plane + k].powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

pub fn tv_objective(u: &Tensor, y: &Tensor, op: &ForwardOperator, alpha: f64) -> Result<f64> {
    let (planes, h, w) = layout(op);
    Ok(0.5 * op.apply(u)?.sub(y)?.norm_sq() + alpha * total_variation(u, planes, h, w))
}

/// Result of [`tv_reconstruct_traced`].
#[derive(Clone, Debug)]
pub struct TvTrace {
    pub image: Tensor,
    /// Objective after each iteration.
    pub objective: Vec<f64>,
}

pub fn tv_reconstruct(y: &Tensor, op: &ForwardOperator, cfg: &TvConfig) -> Result<Tensor> {
    Ok(run(y, op, cfg, false)?.image)
}

pub fn tv_reconstruct_traced(y: &Tensor, op: &ForwardOperator, cfg: &TvConfig) -> Result<TvTrace> {
    run(y, op, cfg, true)
}

fn run(y: &Tensor, op: &ForwardOperator, cfg: &TvConfig, trace: bool) -> Result<TvTrace> {
    if !(cfg.alpha > 0.0) {
        return Err(Error::config(format!("TV weight must be positive, got {}", cfg.alpha)));
    }
    y.expect_shape(&op.range_shape(), "tv_reconstruct")?;
    let (planes, h, w) = layout(op);
    let k_norm = (op.norm_sq() + 8.0).sqrt();
    let tau = cfg.tau.unwrap_or(0.99 / k_norm);
    let sigma = cfg.sigma.unwrap_or(0.99 / k_norm);
    if tau * sigma * k_norm * k_norm > 1.0 + 1e-12 {
        return Err(Error::config("TV step sizes violate tau*sigma*|K|^2 <= 1"));
    }

    let mut u = op.adjoint(y)?;
    let mut u_bar = u.clone();
    let mut p = Tensor::zeros(y.shape());
    let n = u.len();
    let mut qx = vec![0.0; n];
    let mut qy = vec![0.0; n];
    let plane = h * w;
    let mut objective = Vec::new();
    // The reported iterate is the best one seen so far, so the traced
    // objective never increases even though raw primal-dual iterates can.
    let mut best_obj = tv_objective(&u, y, op, cfg.alpha)?;
    let mut best = u.clone();

    for _ in 0..cfg.iters {
        // dual ascent on the data term
        let au = op.apply(&u_bar)?;
        for ((pv, &a), &yv) in p.data_mut().iter_mut().zip(au.data()).zip(y.data()) {
            *pv = (*pv + sigma * (a - yv)) / (1.0 + sigma);
        }
        // dual ascent on TV, projected onto the α-ball
        let (gx, gy) = gradient(u_bar.data(), planes, h, w);
        for k in 0..n {
            qx[k] += sigma * gx[k];
            qy[k] += sigma * gy[k];
        }
        for k in 0..plane {
            let mag: f64 = (0..planes)
                .map(|c| qx[c * plane + k].powi(2) + qy[c * plane + k].powi(2))
                .sum::<f64>()
                .sqrt();
            let s = (mag / cfg.alpha).max(1.0);
            for c in 0..planes {
                qx[c * plane + k] /= s;
                qy[c * plane + k] /= s;
            }
        }
        // primal descent
        let atp = op.adjoint(&p)?;
        let div = divergence(&qx, &qy, planes, h, w);
        let prev = u.clone();
        for k in 0..n {
            u.data_mut()[k] -= tau * (atp.data()[k] - div[k]);
        }
        for k in 0..n {
            u_bar.data_mut()[k] = 2.0 * u.data()[k] - prev.data()[k];
        }
        let obj = tv_objective(&u, y, op, cfg.alpha)?;
        if !obj.is_finite() {
            return Err(Error::Blowup("tv_reconstruct"));
        }
        if obj <= best_obj {
            best_obj = obj;
            best.data_mut().copy_from_slice(u.data());
        }
        if trace {
            objective.push(best_obj);
        }
    }
    Ok(TvTrace { image: best, objective })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::SamplingMask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn divergence_is_negative_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (h, w) = (5, 7);
        let u: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let px: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let py: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (gx, gy) = gradient(&u, 1, h, w);
        let lhs: f64 = (0..h * w).map(|k| gx[k] * px[k] + gy[k] * py[k]).sum();
        let div = divergence(&px, &py, 1, h, w);
        let rhs: f64 = -(0..h * w).map(|k| u[k] * div[k]).sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn vanishing_weight_recovers_inverse_dft() {
        let op = ForwardOperator::masked_fourier(SamplingMask::full(16, 16), false);
        let u = Tensor::from_fn(&[16, 16], |k| ((k * 7) % 11) as f64 / 11.0);
        let y = op.apply(&u).unwrap();
        let cfg = TvConfig {
            alpha: 1e-9,
            ..TvConfig::default()
        };
        let rec = tv_reconstruct(&y, &op, &cfg).unwrap();
        assert!(rec.max_abs_diff(&op.adjoint(&y).unwrap()).unwrap() < 1e-3);
    }

    #[test]
    fn identity_objective_non_increasing() {
        let op = ForwardOperator::identity(24, 24);
        for alpha in [0.01, 0.05, 0.2] {
            let y = Tensor::from_fn(&[24, 24], |k| {
                let (i, j) = (k / 24, k % 24);
                if (6..18).contains(&i) && (4..14).contains(&j) {
                    0.8
                } else {
                    0.1
                }
            });
            let t = tv_reconstruct_traced(&y, &op, &TvConfig { alpha, ..TvConfig::default() }).unwrap();
            let start = tv_objective(&y, &y, &op, alpha).unwrap();
            let mut last = start;
            for &o in &t.objective {
                assert!(o <= last + 1e-12, "alpha {alpha}: {o} > {last}");
                last = o;
            }
        }
    }

    #[test]
    fn non_positive_weight_rejected() {
        let op = ForwardOperator::identity(4, 4);
        let cfg = TvConfig {
            alpha: 0.0,
            ..TvConfig::default()
        };
        assert!(tv_reconstruct(&Tensor::zeros(&[4, 4]), &op, &cfg).is_err());
    }
}
