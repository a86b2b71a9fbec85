use std::rc::Rc;

use crate::diff::{CustomGradOp, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How samples outside the grid are read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    /// Outside values are zero. Used for images.
    Zero,
    /// Coordinates are clamped to the grid.
    Border,
    /// The grid wraps around. Used for displacement fields, matching the
    /// periodic smoothing kernel.
    Periodic,
}

/// The identity map `[2, H, W]`: channel 0 holds the column coordinate,
/// channel 1 the row coordinate.
pub fn identity_map(h: usize, w: usize) -> Tensor {
    let plane = h * w;
    Tensor::from_fn(&[2, h, w], |k| {
        if k < plane {
            (k % w) as f64
        } else {
            ((k - plane) / w) as f64
        }
    })
}

struct Corner {
    index: Option<usize>,
    weight: f64,
    dx: f64,
    dy: f64,
}

fn corners(x: f64, y: f64, h: usize, w: usize, mode: Boundary) -> [Corner; 4] {
    let (mut x, mut y) = (x, y);
    let (mut gx, mut gy) = (1.0, 1.0);
    if mode == Boundary::Border {
        let (xc, yc) = (x.clamp(0.0, (w - 1) as f64), y.clamp(0.0, (h - 1) as f64));
        if xc != x {
            gx = 0.0;
        }
        if yc != y {
            gy = 0.0;
        }
        x = xc;
        y = yc;
    }
    match mode {
        Boundary::Periodic => {
            x = x.rem_euclid(w as f64);
            y = y.rem_euclid(h as f64);
        }
        // far outside, every corner is already out of range
        Boundary::Zero => {
            x = x.clamp(-2.0, w as f64 + 1.0);
            y = y.clamp(-2.0, h as f64 + 1.0);
        }
        Boundary::Border => {}
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |i: isize, j: isize| -> Option<usize> {
        match mode {
            Boundary::Zero => {
                (i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w).then(|| i as usize * w + j as usize)
            }
            Boundary::Border => {
                let i = i.clamp(0, h as isize - 1) as usize;
                let j = j.clamp(0, w as isize - 1) as usize;
                Some(i * w + j)
            }
            Boundary::Periodic => {
                let i = i.rem_euclid(h as isize) as usize;
                let j = j.rem_euclid(w as isize) as usize;
                Some(i * w + j)
            }
        }
    };
    [
        Corner {
            index: at(y0, x0),
            weight: (1.0 - fx) * (1.0 - fy),
            dx: -(1.0 - fy) * gx,
            dy: -(1.0 - fx) * gy,
        },
        Corner {
            index: at(y0, x0 + 1),
            weight: fx * (1.0 - fy),
            dx: (1.0 - fy) * gx,
            dy: -fx * gy,
        },
        Corner {
            index: at(y0 + 1, x0),
            weight: (1.0 - fx) * fy,
            dx: -fy * gx,
            dy: (1.0 - fx) * gy,
        },
        Corner {
            index: at(y0 + 1, x0 + 1),
            weight: fx * fy,
            dx: fy * gx,
            dy: fx * gy,
        },
    ]
}

fn check(img: &Tensor, phi: &Tensor) -> Result<(usize, usize, usize)> {
    let ps = phi.shape();
    if ps.len() != 3 || ps[0] != 2 {
        return Err(Error::InvalidShape {
            shape: ps.to_vec(),
            reason: "deformation must be [2, H, W]".into(),
        });
    }
    let (h, w) = (ps[1], ps[2]);
    let is = img.shape();
    let planes = match is.len() {
        2 => 1,
        3 => is[0],
        _ => 0,
    };
    if planes == 0 || is[is.len() - 2..] != [h, w] {
        return Err(Error::ShapeMismatch {
            op: "warp",
            left: is.to_vec(),
            right: ps.to_vec(),
        });
    }
    Ok((planes, h, w))
}

/// Bilinear resampling: `out(x) = img(φ(x))` for every plane of `img`.
pub fn warp(img: &Tensor, phi: &Tensor, mode: Boundary) -> Result<Tensor> {
    let (planes, h, w) = check(img, phi)?;
    let plane = h * w;
    let mut out = Tensor::zeros(img.shape());
    let (px, py) = phi.data().split_at(plane);
    for k in 0..plane {
        let cs = corners(px[k], py[k], h, w, mode);
        for c in 0..planes {
            let src = &img.data()[c * plane..(c + 1) * plane];
            let mut acc = 0.0;
            for cr in &cs {
                if let Some(i) = cr.index {
                    acc += cr.weight * src[i];
                }
            }
            out.data_mut()[c * plane + k] = acc;
        }
    }
    Ok(out)
}

/// Gradients of `⟨up, warp(img, φ)⟩` with respect to `img` and `φ`.
pub fn warp_backward(img: &Tensor, phi: &Tensor, up: &Tensor, mode: Boundary) -> Result<(Tensor, Tensor)> {
    let (planes, h, w) = check(img, phi)?;
    up.same_shape(img, "warp_backward")?;
    let plane = h * w;
    let mut g_img = Tensor::zeros(img.shape());
    let mut g_phi = Tensor::zeros(phi.shape());
    let (px, py) = phi.data().split_at(plane);
    for k in 0..plane {
        let cs = corners(px[k], py[k], h, w, mode);
        let (mut dx, mut dy) = (0.0, 0.0);
        for c in 0..planes {
            let u = up.data()[c * plane + k];
            if u == 0.0 {
                continue;
            }
            for cr in &cs {
                if let Some(i) = cr.index {
                    let v = img.data()[c * plane + i];
                    g_img.data_mut()[c * plane + i] += cr.weight * u;
                    dx += cr.dx * v * u;
                    dy += cr.dy * v * u;
                }
            }
        }
        g_phi.data_mut()[k] = dx;
        g_phi.data_mut()[plane + k] = dy;
    }
    Ok((g_img, g_phi))
}

/// `outer ∘ inner` for absolute maps whose displacements are periodic.
pub fn compose(outer: &Tensor, inner: &Tensor) -> Result<Tensor> {
    let ps = outer.shape();
    if ps.len() != 3 {
        return Err(Error::InvalidShape {
            shape: ps.to_vec(),
            reason: "deformation must be [2, H, W]".into(),
        });
    }
    let disp = outer.sub(&identity_map(ps[1], ps[2]))?;
    inner.add(&warp(&disp, inner, Boundary::Periodic)?)
}

struct WarpOp(Boundary);

impl CustomGradOp for WarpOp {
    fn name(&self) -> &'static str {
        "warp"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        warp(inputs[0], inputs[1], self.0)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, up: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (gi, gp) = warp_backward(inputs[0], inputs[1], up, self.0)?;
        Ok(vec![Some(gi), Some(gp)])
    }
}

/// Differentiable [`warp`], with gradients flowing to both `img` and `φ`.
pub fn warp_var(img: &Var, phi: &Var, mode: Boundary) -> Result<Var> {
    Var::apply(Rc::new(WarpOp(mode)), &[img, phi])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn extreme_coordinates_do_not_panic() {
        let img = random(&[5, 6], 3);
        let mut phi = identity_map(5, 6);
        phi.data_mut()[0] = f64::INFINITY;
        phi.data_mut()[1] = 1e300;
        phi.data_mut()[31] = -1e300;
        phi.data_mut()[3] += 3e7;
        phi.data_mut()[32] = f64::NEG_INFINITY;
        for mode in [Boundary::Zero, Boundary::Border, Boundary::Periodic] {
            let out = warp(&img, &phi, mode).unwrap();
            assert_eq!(out.shape(), img.shape());
        }
        let z = warp(&img, &phi, Boundary::Zero).unwrap();
        assert_eq!(z.data()[1], 0.0);
        let p = warp(&img, &phi, Boundary::Periodic).unwrap();
        assert_eq!(p.data()[3], img.data()[3]);
    }

    #[test]
    fn identity_is_bit_exact() {
        let img = random(&[3, 7, 9], 1);
        for mode in [Boundary::Zero, Boundary::Border, Boundary::Periodic] {
            assert_eq!(warp(&img, &identity_map(7, 9), mode).unwrap(), img);
        }
    }

    #[test]
    fn integer_shift_leaves_zero_column() {
        let img = random(&[6, 6], 2);
        let mut phi = identity_map(6, 6);
        for k in 0..36 {
            phi.data_mut()[k] += 1.0;
        }
        let out = warp(&img, &phi, Boundary::Zero).unwrap();
        for i in 0..6 {
            for j in 0..5 {
                assert_eq!(out.data()[i * 6 + j], img.data()[i * 6 + j + 1]);
            }
            assert_eq!(out.data()[i * 6 + 5], 0.0);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let img = random(&[8, 8], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let jitter = Tensor::from_fn(&[2, 8, 8], |_| rng.random_range(-0.7..0.7));
        let phi = identity_map(8, 8).add(&jitter).unwrap();
        let weight = random(&[8, 8], 5);
        for mode in [Boundary::Zero, Boundary::Border, Boundary::Periodic] {
            let loss = |i: &Tensor, p: &Tensor| -> Result<f64> { Ok(warp(i, p, mode)?.mul(&weight)?.norm_sq()) };
            let iv = Var::leaf(img.clone());
            let pv = Var::leaf(phi.clone());
            let out = warp_var(&iv, &pv, mode).unwrap();
            let g = out.mul(&Var::constant(weight.clone())).unwrap().sq_norm().backward().unwrap();
            let fd_phi = finite_difference(|p| loss(&img, p), &phi, 1e-6).unwrap();
            let fd_img = finite_difference(|i| loss(i, &phi), &img, 1e-6).unwrap();
            assert!(relative_error(g.get(&pv).unwrap(), &fd_phi, 1e-8) < 1e-4);
            assert!(relative_error(g.get(&iv).unwrap(), &fd_img, 1e-8) < 1e-4);
        }
    }

    #[test]
    fn border_mode_clamps() {
        let img = Tensor::from_fn(&[1, 4], |k| k as f64);
        let phi = Tensor::new(&[2, 1, 4], vec![-3.0, 0.5, 2.5, 9.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let out = warp(&img, &phi, Boundary::Border).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 2.5, 3.0]);
        let out = warp(&img, &phi, Boundary::Periodic).unwrap();
        assert_eq!(out.data(), &[1.0, 0.5, 2.5, 1.0]);
    }
}
