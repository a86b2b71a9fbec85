use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Var;

fn one(g: Tensor) -> Result<Vec<Option<Tensor>>> {
    Ok(vec![Some(g)])
}

impl Var {
    pub fn add(&self, other: &Var) -> Result<Var> {
        let v = self.value().add(other.value())?;
        Ok(Var::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|_, _, up| Ok(vec![Some(up.clone()), Some(up.clone())])),
        ))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let v = self.value().sub(other.value())?;
        Ok(Var::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|_, _, up| Ok(vec![Some(up.clone()), Some(up.scale(-1.0))])),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        let v = self.value().mul(other.value())?;
        Ok(Var::from_op(
            v,
            vec![self.clone(), other.clone()],
            Box::new(|p, _, up| {
                Ok(vec![
                    Some(up.mul(p[1].value())?),
                    Some(up.mul(p[0].value())?),
                ])
            }),
        ))
    }

    pub fn scale(&self, s: f64) -> Var {
        Var::from_op(
            self.value().scale(s),
            vec![self.clone()],
            Box::new(move |_, _, up| one(up.scale(s))),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        Var::from_op(
            self.value().map(|v| v + s),
            vec![self.clone()],
            Box::new(|_, _, up| one(up.clone())),
        )
    }

    /// Multiplies every entry by a single-element variable.
    pub fn mul_scalar(&self, s: &Var) -> Result<Var> {
        if s.value().len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar",
                left: self.shape().to_vec(),
                right: s.shape().to_vec(),
            });
        }
        let k = s.value().item();
        Ok(Var::from_op(
            self.value().scale(k),
            vec![self.clone(), s.clone()],
            Box::new(|p, _, up| {
                let k = p[1].value().item();
                let ds = up.dot(p[0].value())?;
                Ok(vec![Some(up.scale(k)), Some(Tensor::new(p[1].shape(), vec![ds])?)])
            }),
        ))
    }

    pub fn sum(&self) -> Var {
        Var::from_op(
            Tensor::scalar(self.value().sum()),
            vec![self.clone()],
            Box::new(|p, _, up| one(Tensor::full(p[0].shape(), up.item()))),
        )
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Squared Euclidean norm as a scalar.
    pub fn sq_norm(&self) -> Var {
        Var::from_op(
            Tensor::scalar(self.value().norm_sq()),
            vec![self.clone()],
            Box::new(|p, _, up| one(p[0].value().scale(2.0 * up.item()))),
        )
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        let v = self.value().sum_axis(axis)?;
        Ok(Var::from_op(
            v,
            vec![self.clone()],
            Box::new(move |p, _, up| {
                let shape = p[0].shape();
                let outer: usize = shape[..axis].iter().product();
                let n = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let u = up.data();
                let mut g = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        g.extend_from_slice(&u[o * inner..(o + 1) * inner]);
                    }
                }
                one(Tensor::new(shape, g)?)
            }),
        ))
    }

    pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|v| v.value()).collect();
        let out = Tensor::concat(&values, axis)?;
        let extents: Vec<usize> = parts.iter().map(|v| v.shape()[axis]).collect();
        Ok(Var::from_op(
            out,
            parts.iter().map(|&v| v.clone()).collect(),
            Box::new(move |_, _, up| {
                let mut start = 0;
                let mut grads = Vec::with_capacity(extents.len());
                for &e in &extents {
                    grads.push(Some(up.slice(axis, start, start + e)?));
                    start += e;
                }
                Ok(grads)
            }),
        ))
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var> {
        let v = self.value().slice(axis, start, end)?;
        Ok(Var::from_op(
            v,
            vec![self.clone()],
            Box::new(move |p, _, up| {
                let shape = p[0].shape();
                let outer: usize = shape[..axis].iter().product();
                let n = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut g = vec![0.0; p[0].value().len()];
                let w = (end - start) * inner;
                for o in 0..outer {
                    g[(o * n + start) * inner..(o * n + end) * inner]
                        .copy_from_slice(&up.data()[o * w..(o + 1) * w]);
                }
                one(Tensor::new(shape, g)?)
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().reshape(shape)?;
        Ok(Var::from_op(
            v,
            vec![self.clone()],
            Box::new(|p, _, up| one(up.reshape(p[0].shape())?)),
        ))
    }

    /// `x` for `x >= 0`, `slope * x` otherwise.
    pub fn leaky_relu(&self, slope: f64) -> Var {
        Var::from_op(
            self.value().map(|x| if x >= 0.0 { x } else { slope * x }),
            vec![self.clone()],
            Box::new(move |p, _, up| {
                up.zip_map(p[0].value(), "leaky_relu", |u, x| if x >= 0.0 { u } else { slope * u })
                    .map(|g| vec![Some(g)])
            }),
        )
    }

    /// Logistic function `1 / (1 + exp(-x))`.
    pub fn sigmoid(&self) -> Var {
        Var::from_op(
            self.value().map(sigmoid),
            vec![self.clone()],
            Box::new(|_, out, up| {
                up.zip_map(out, "sigmoid", |u, s| u * s * (1.0 - s))
                    .map(|g| vec![Some(g)])
            }),
        )
    }

    /// Adds a per-channel bias `[C]` to a `[C, H, W]` tensor.
    pub fn add_channel_bias(&self, bias: &Var) -> Result<Var> {
        let shape = self.shape().to_vec();
        if shape.len() != 3 || bias.shape() != [shape[0]] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                left: shape,
                right: bias.shape().to_vec(),
            });
        }
        let plane = shape[1] * shape[2];
        let mut out = self.value().clone();
        for (c, &b) in bias.value().data().iter().enumerate() {
            for v in &mut out.data_mut()[c * plane..(c + 1) * plane] {
                *v += b;
            }
        }
        Ok(Var::from_op(
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |p, _, up| {
                let channels = p[1].value().len();
                let db: Vec<f64> = (0..channels)
                    .map(|c| up.data()[c * plane..(c + 1) * plane].iter().sum())
                    .collect();
                Ok(vec![Some(up.clone()), Some(Tensor::new(&[channels], db)?)])
            }),
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample2(&self) -> Result<Var> {
        let s = self.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "upsample2 expects [C, H, W]".into(),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let x = self.value().data();
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(ch * 2 * h + i) * 2 * w + j] = x[(ch * h + i / 2) * w + j / 2];
                }
            }
        }
        Ok(Var::from_op(
            Tensor::new(&[c, 2 * h, 2 * w], out)?,
            vec![self.clone()],
            Box::new(move |_, _, up| {
                let u = up.data();
                let mut g = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            g[(ch * h + i / 2) * w + j / 2] += u[(ch * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
                one(Tensor::new(&[c, h, w], g)?)
            }),
        ))
    }

    /// Applies a linear map whose adjoint is supplied by the caller.
    pub fn linear_map(
        &self,
        forward: impl Fn(&Tensor) -> Result<Tensor>,
        adjoint: impl Fn(&Tensor) -> Result<Tensor> + 'static,
    ) -> Result<Var> {
        let v = forward(self.value())?;
        Ok(Var::from_op(
            v,
            vec![self.clone()],
            Box::new(move |_, _, up| one(adjoint(up)?)),
        ))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sigmoid_and_leaky_values() {
        let x = Var::leaf(Tensor::scalar(0.0));
        let s = x.sigmoid();
        assert_eq!(s.value().item(), 0.5);
        let g = s.sum().backward().unwrap();
        assert_eq!(g.get(&x).unwrap().item(), 0.25);
        let l = Var::constant(Tensor::scalar(-1.0)).leaky_relu(0.2);
        assert!((l.value().item() + 0.2).abs() < 1e-15);
    }

    /// A composite of every elementwise/reduction op, checked against
    /// central differences.
    fn composite(x: &Var, w: &Var) -> Result<Var> {
        let a = x.mul(w)?.add(&x.scale(0.5))?.sub(w)?;
        let b = a.leaky_relu(0.2).sigmoid().add_scalar(0.1);
        let c = Var::concat(&[&b, x], 0)?.slice(0, 1, 3)?;
        let k = w.reshape(&[12])?.slice(0, 0, 1)?;
        let d = c.mul_scalar(&k)?.sum_axis(1)?;
        d.sq_norm().add(&c.mean())?.add(&b.upsample2()?.sum())
    }

    #[test]
    fn composite_matches_finite_differences() {
        let x0 = random(&[2, 2, 3], 1);
        let w0 = random(&[2, 2, 3], 2);
        let x = Var::leaf(x0.clone());
        let w = Var::leaf(w0.clone());
        let g = composite(&x, &w).unwrap().backward().unwrap();
        let fx = |t: &Tensor| {
            Ok(composite(&Var::constant(t.clone()), &Var::constant(w0.clone()))?
                .value()
                .item())
        };
        let fw = |t: &Tensor| {
            Ok(composite(&Var::constant(x0.clone()), &Var::constant(t.clone()))?
                .value()
                .item())
        };
        let nx = finite_difference(fx, &x0, 1e-5).unwrap();
        let nw = finite_difference(fw, &w0, 1e-5).unwrap();
        assert!(relative_error(g.get(&x).unwrap(), &nx, 1e-8) < 1e-6);
        assert!(relative_error(g.get(&w).unwrap(), &nw, 1e-8) < 1e-6);
    }

    #[test]
    fn channel_bias_gradient() {
        let x = Var::leaf(random(&[2, 3, 3], 3));
        let b = Var::leaf(Tensor::new(&[2], vec![0.5, -1.0]).unwrap());
        let y = x.add_channel_bias(&b).unwrap().sq_norm();
        let g = y.backward().unwrap();
        let b0 = b.value().clone();
        let x0 = x.value().clone();
        let num = finite_difference(
            |t| {
                Ok(Var::constant(x0.clone())
                    .add_channel_bias(&Var::constant(t.clone()))?
                    .sq_norm()
                    .value()
                    .item())
            },
            &b0,
            1e-5,
        )
        .unwrap();
        assert!(relative_error(g.get(&b).unwrap(), &num, 1e-8) < 1e-6);
    }

    #[test]
    fn random_graph_matches_finite_differences() {
        // 10-entry input pushed through a fixed random chain of ops.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::from_fn(&[10], |_| rng.random_range(-1.0..1.0));
        let c = Tensor::from_fn(&[10], |_| rng.random_range(-1.0..1.0));
        let f = |x: &Var| -> Result<Var> {
            let cv = Var::constant(c.clone());
            let a = x.mul(&cv)?.sigmoid();
            let b = x.leaky_relu(0.3).mul(&a)?;
            b.add(&x.scale(-0.2))?.sq_norm().add(&a.sum())
        };
        let x = Var::leaf(x0.clone());
        let g = f(&x).unwrap().backward().unwrap();
        let num = finite_difference(|t| Ok(f(&Var::constant(t.clone()))?.value().item()), &x0, 1e-5).unwrap();
        assert!(relative_error(g.get(&x).unwrap(), &num, 1e-8) < 1e-6);
    }
}
