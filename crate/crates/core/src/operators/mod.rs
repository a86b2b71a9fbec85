//! Forward operators `A` with exact adjoints, sampling masks and noise.

mod fourier;
pub mod mask;
mod radon;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::KeyValue;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use fourier::MaskedFourier;
pub use mask::{make_mask, MaskPattern, SamplingMask};
pub use radon::{detector_count, RayTransform};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OperatorKind {
    MaskedFourier,
    RayTransform,
    Identity,
}

#[derive(Clone, Debug)]
enum Inner {
    Identity { h: usize, w: usize },
    Fourier(MaskedFourier),
    Ray(RayTransform),
}

/// A linear measurement operator together with its adjoint.
#[derive(Clone, Debug)]
pub struct ForwardOperator {
    inner: Inner,
}

impl ForwardOperator {
    pub fn identity(h: usize, w: usize) -> Self {
        ForwardOperator {
            inner: Inner::Identity { h, w },
        }
    }

    /// Masked orthonormal DFT. With `complex_domain` the image is a
    /// 2-channel complex tensor, otherwise a real `[H, W]` image.
    pub fn masked_fourier(mask: SamplingMask, complex_domain: bool) -> Self {
        ForwardOperator {
            inner: Inner::Fourier(MaskedFourier::new(mask, complex_domain)),
        }
    }

    /// Parallel-beam ray transform with `n_views` angles over 360 degrees.
    pub fn ray_transform(h: usize, w: usize, n_views: usize) -> Self {
        ForwardOperator {
            inner: Inner::Ray(RayTransform::new(h, w, n_views)),
        }
    }

    pub fn kind(&self) -> OperatorKind {
        match &self.inner {
            Inner::Identity { .. } => OperatorKind::Identity,
            Inner::Fourier(_) => OperatorKind::MaskedFourier,
            Inner::Ray(_) => OperatorKind::RayTransform,
        }
    }

    pub fn domain_shape(&self) -> Vec<usize> {
        match &self.inner {
            Inner::Identity { h, w } => vec![*h, *w],
            Inner::Fourier(f) => f.domain_shape(),
            Inner::Ray(r) => vec![r.h, r.w],
        }
    }

    pub fn range_shape(&self) -> Vec<usize> {
        match &self.inner {
            Inner::Identity { h, w } => vec![*h, *w],
            Inner::Fourier(f) => f.range_shape(),
            Inner::Ray(r) => vec![r.n_views, r.n_det],
        }
    }

    /// Image grid `(H, W)`.
    pub fn grid(&self) -> (usize, usize) {
        let d = self.domain_shape();
        (d[d.len() - 2], d[d.len() - 1])
    }

    pub fn fourier(&self) -> Option<&MaskedFourier> {
        match &self.inner {
            Inner::Fourier(f) => Some(f),
            _ => None,
        }
    }

    pub fn mask(&self) -> Option<&SamplingMask> {
        self.fourier().map(|f| &f.mask)
    }

    pub fn n_views(&self) -> Option<usize> {
        match &self.inner {
            Inner::Ray(r) => Some(r.n_views),
            _ => None,
        }
    }

    /// Noiseless `A x`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_shape(&self.domain_shape(), "operator apply")?;
        Ok(match &self.inner {
            Inner::Identity { .. } => x.clone(),
            Inner::Fourier(f) => f.apply(x),
            Inner::Ray(r) => r.apply(x),
        })
    }

    /// `Aᵀ y`.
    pub fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        y.expect_shape(&self.range_shape(), "operator adjoint")?;
        Ok(match &self.inner {
            Inner::Identity { .. } => y.clone(),
            Inner::Fourier(f) => f.adjoint(y),
            Inner::Ray(r) => r.adjoint(y),
        })
    }

    /// `AᵀA x`.
    pub fn normal(&self, x: &Tensor) -> Result<Tensor> {
        self.adjoint(&self.apply(x)?)
    }

    /// `‖A‖²`: exact for identity and Fourier, power iteration for rays.
    pub fn norm_sq(&self) -> f64 {
        match &self.inner {
            Inner::Identity { .. } => 1.0,
            Inner::Fourier(f) => {
                if f.mask.count() > 0 {
                    1.0
                } else {
                    0.0
                }
            }
            Inner::Ray(r) => {
                let mut x = Tensor::ones(&[r.h, r.w]);
                let mut est = 0.0;
                for _ in 0..60 {
                    let y = r.adjoint(&r.apply(&x));
                    est = y.norm() / x.norm();
                    x = y.scale(1.0 / y.norm());
                }
                est.min(r.norm_sq_bound())
            }
        }
    }
}

/// Serializable description of a [`ForwardOperator`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OperatorSpec {
    Identity,
    MaskedFourier {
        pattern: MaskPattern,
        rate: f64,
        center: usize,
        seed: u64,
        complex_domain: bool,
    },
    RayTransform {
        views: usize,
    },
}

impl OperatorSpec {
    pub fn build(&self, h: usize, w: usize) -> Result<ForwardOperator> {
        Ok(match *self {
            OperatorSpec::Identity => ForwardOperator::identity(h, w),
            OperatorSpec::MaskedFourier {
                pattern,
                rate,
                center,
                seed,
                complex_domain,
            } => ForwardOperator::masked_fourier(make_mask(pattern, rate, center, seed, h, w)?, complex_domain),
            OperatorSpec::RayTransform { views } => {
                if views == 0 {
                    return Err(Error::config("ray transform needs at least one view"));
                }
                ForwardOperator::ray_transform(h, w, views)
            }
        })
    }

    /// Writes `operator`, and the parameters of the chosen kind, into `kv`.
    pub fn write_kv(&self, kv: &mut KeyValue) {
        match *self {
            OperatorSpec::Identity => kv.set("operator", "identity"),
            OperatorSpec::MaskedFourier {
                pattern,
                rate,
                center,
                seed,
                complex_domain,
            } => {
                kv.set("operator", "masked-fourier");
                kv.set("pattern", pattern);
                kv.set("rate", rate);
                kv.set("mask_center", center);
                kv.set("mask_seed", seed);
                kv.set("complex_domain", complex_domain);
            }
            OperatorSpec::RayTransform { views } => {
                kv.set("operator", "ray-transform");
                kv.set("views", views);
            }
        }
    }

    pub fn from_kv(kv: &KeyValue) -> Result<Self> {
        let name: String = kv.get("operator")?;
        match name.as_str() {
            "identity" => Ok(OperatorSpec::Identity),
            "masked-fourier" => Ok(OperatorSpec::MaskedFourier {
                pattern: kv.get("pattern")?,
                rate: kv.get("rate")?,
                center: kv.get_or("mask_center", 4)?,
                seed: kv.get_or("mask_seed", 0)?,
                complex_domain: kv.get_or("complex_domain", false)?,
            }),
            "ray-transform" => Ok(OperatorSpec::RayTransform { views: kv.get("views")? }),
            other => Err(Error::config(format!("unknown operator '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    /// `u + σ(ξ₁ + iξ₂)` before the masked DFT.
    ComplexImageDomain,
    /// `u + σξ` before projection.
    GaussianPreProjection,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn none() -> Self {
        NoiseModel {
            kind: NoiseKind::GaussianPreProjection,
            sigma: 0.0,
            seed: 0,
        }
    }

    /// The noise model paired with an operator kind.
    pub fn for_operator(kind: OperatorKind, sigma: f64, seed: u64) -> Self {
        let kind = match kind {
            OperatorKind::MaskedFourier => NoiseKind::ComplexImageDomain,
            _ => NoiseKind::GaussianPreProjection,
        };
        NoiseModel { kind, sigma, seed }
    }
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Worst relative mismatch `|⟨Ax, y⟩ − ⟨x, Aᵀy⟩| / max(|⟨Ax, y⟩|, |⟨x, Aᵀy⟩|)`
/// over `pairs` random uniform pairs.
pub fn adjoint_mismatch(op: &ForwardOperator, pairs: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let x = Tensor::from_fn(&op.domain_shape(), |_| rng.random_range(-1.0..1.0));
        let y = Tensor::from_fn(&op.range_shape(), |_| rng.random_range(-1.0..1.0));
        let lhs = op.apply(&x)?.dot(&y)?;
        let rhs = x.dot(&op.adjoint(&y)?)?;
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

/// `y = A(u + noise)` with seeded, bit-reproducible noise.
pub fn simulate_measurement(u: &Tensor, op: &ForwardOperator, noise: &NoiseModel) -> Result<Tensor> {
    if !(noise.sigma >= 0.0) {
        return Err(Error::config(format!("noise sigma must be >= 0, got {}", noise.sigma)));
    }
    u.expect_shape(&op.domain_shape(), "simulate_measurement")?;
    if noise.sigma == 0.0 {
        return op.apply(u);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let n = u.len();
    match (noise.kind, op.fourier()) {
        (NoiseKind::ComplexImageDomain, Some(f)) if !f.complex_domain => {
            let re: Vec<f64> = u
                .data()
                .iter()
                .zip(gaussian(n, &mut rng))
                .map(|(a, e)| a + noise.sigma * e)
                .collect();
            let im: Vec<f64> = gaussian(n, &mut rng).into_iter().map(|e| noise.sigma * e).collect();
            Ok(f.forward_complex(&re, Some(&im)))
        }
        _ => {
            let mut noisy = u.clone();
            for (v, e) in noisy.data_mut().iter_mut().zip(gaussian(n, &mut rng)) {
                *v += noise.sigma * e;
            }
            op.apply(&noisy)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn adjoint_error(op: &ForwardOperator, pairs: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..pairs {
            let x = random(&op.domain_shape(), &mut rng);
            let y = random(&op.range_shape(), &mut rng);
            let lhs = op.apply(&x).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&op.adjoint(&y).unwrap()).unwrap();
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
        }
        worst
    }

    #[test]
    fn identity_is_identity() {
        let op = ForwardOperator::identity(4, 5);
        let x = Tensor::from_fn(&[4, 5], |i| i as f64);
        assert_eq!(op.apply(&x).unwrap(), x);
        assert_eq!(op.adjoint(&x).unwrap(), x);
    }

    #[test]
    fn delta_has_flat_spectrum() {
        let op = ForwardOperator::masked_fourier(SamplingMask::full(8, 8), false);
        let mut x = Tensor::zeros(&[8, 8]);
        x.data_mut()[0] = 1.0;
        let y = op.apply(&x).unwrap();
        for k in 0..64 {
            let m = (y.data()[k].powi(2) + y.data()[64 + k].powi(2)).sqrt();
            assert!((m - 1.0 / 8.0).abs() < 1e-14);
        }
    }

    #[test]
    fn full_mask_is_unitary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for complex in [false, true] {
            let op = ForwardOperator::masked_fourier(SamplingMask::full(12, 10), complex);
            let x = random(&op.domain_shape(), &mut rng);
            let back = op.normal(&x).unwrap();
            assert!(back.sub(&x).unwrap().norm() < 1e-10);
        }
    }

    #[test]
    fn fourier_adjoint_all_patterns() {
        for p in MaskPattern::ALL {
            for rate in [0.2, 0.25, 1.0 / 3.0] {
                let m = make_mask(p, rate, 3, 5, 32, 32).unwrap();
                for complex in [false, true] {
                    let op = ForwardOperator::masked_fourier(m.clone(), complex);
                    assert!(adjoint_error(&op, 20, 1) < 1e-10);
                }
            }
        }
    }

    #[test]
    fn ray_adjoint() {
        for views in [18, 181] {
            let op = ForwardOperator::ray_transform(24, 20, views);
            assert_eq!(op.range_shape(), vec![views, detector_count(24, 20)]);
            assert!(adjoint_error(&op, 20, 2) < 1e-10);
        }
    }

    #[test]
    fn disc_sinogram_rotational_symmetry() {
        let n = 32;
        let c = (n as f64 - 1.0) / 2.0;
        let disc = Tensor::from_fn(&[n, n], |k| {
            let (i, j) = ((k / n) as f64 - c, (k % n) as f64 - c);
            if i * i + j * j <= 100.0 {
                1.0
            } else {
                0.0
            }
        });
        // 4 views over 360 degrees: 0, 90, 180, 270.
        let op = ForwardOperator::ray_transform(n, n, 4);
        let sino = op.apply(&disc).unwrap();
        let row0 = sino.slice(0, 0, 1).unwrap();
        let row1 = sino.slice(0, 1, 2).unwrap();
        assert!(row0.max_abs_diff(&row1).unwrap() < 1e-8);
        assert!(row0.max_abs() > 1.0);
    }

    #[test]
    fn operators_are_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mask = make_mask(MaskPattern::Radial, 0.25, 2, 0, 32, 32).unwrap();
        for op in [
            ForwardOperator::masked_fourier(mask, false),
            ForwardOperator::ray_transform(32, 32, 18),
        ] {
            let x = random(&op.domain_shape(), &mut rng);
            let z = random(&op.domain_shape(), &mut rng);
            let (a, b) = (0.7, -1.3);
            let mut comb = x.scale(a);
            comb.axpy(b, &z).unwrap();
            let mut expect = op.apply(&x).unwrap().scale(a);
            expect.axpy(b, &op.apply(&z).unwrap()).unwrap();
            assert!(op.apply(&comb).unwrap().max_abs_diff(&expect).unwrap() < 1e-12);
        }
    }

    #[test]
    fn zero_sigma_is_noiseless() {
        let op = ForwardOperator::ray_transform(16, 16, 18);
        let u = Tensor::full(&[16, 16], 0.5);
        let y = simulate_measurement(&u, &op, &NoiseModel::for_operator(op.kind(), 0.0, 3)).unwrap();
        assert_eq!(y, op.apply(&u).unwrap());
        assert!(simulate_measurement(&u, &op, &NoiseModel::for_operator(op.kind(), -1.0, 3)).is_err());
    }

    #[test]
    fn mri_noise_energy_monte_carlo() {
        let (h, w, sigma) = (16, 16, 0.05);
        let mask = make_mask(MaskPattern::Random2d, 0.25, 2, 1, h, w).unwrap();
        let expected = 2.0 * sigma * sigma * mask.count() as f64;
        let op = ForwardOperator::masked_fourier(mask, false);
        let u = Tensor::from_fn(&[h, w], |k| ((k % 7) as f64) / 7.0);
        let clean = op.apply(&u).unwrap();
        let draws = 1000;
        let mean: f64 = (0..draws)
            .map(|s| {
                let y = simulate_measurement(&u, &op, &NoiseModel::for_operator(op.kind(), sigma, s)).unwrap();
                y.sub(&clean).unwrap().norm_sq()
            })
            .sum::<f64>()
            / draws as f64;
        assert!((mean - expected).abs() / expected < 0.05, "{mean} vs {expected}");
    }

    #[test]
    fn noise_is_reproducible() {
        let op = ForwardOperator::ray_transform(16, 16, 18);
        let u = Tensor::full(&[16, 16], 0.5);
        let nm = NoiseModel::for_operator(op.kind(), 0.1, 42);
        let a = simulate_measurement(&u, &op, &nm).unwrap();
        let b = simulate_measurement(&u, &op, &nm).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn sparse_view_range_shape() {
        let op = ForwardOperator::ray_transform(64, 64, 18);
        assert_eq!(op.range_shape(), vec![18, 91]);
    }

    #[test]
    fn operator_spec_roundtrip() {
        let specs = [
            OperatorSpec::Identity,
            OperatorSpec::MaskedFourier {
                pattern: MaskPattern::Radial,
                rate: 0.25,
                center: 4,
                seed: 9,
                complex_domain: false,
            },
            OperatorSpec::RayTransform { views: 18 },
        ];
        for s in specs {
            let mut kv = KeyValue::new();
            s.write_kv(&mut kv);
            let back = OperatorSpec::from_kv(&KeyValue::parse(&kv.to_string()).unwrap()).unwrap();
            assert_eq!(back, s);
            assert!(back.build(32, 32).is_ok());
        }
    }
}
