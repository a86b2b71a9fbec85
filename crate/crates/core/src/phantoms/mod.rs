//! Synthetic cardiac-like phantoms with an analytic, smooth contraction, and
//! dataset assembly on top of them.

mod dataset;

pub use dataset::{build_dataset, load_dataset, Dataset, DatasetManifest, Modality, SampleEntry, Split};

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Small disc inside the blood pool.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disc {
    /// Polar angle around the ring centre.
    pub angle: f64,
    /// Distance from the centre as a fraction of the inner ring radius.
    pub offset: f64,
    pub radius: f64,
    pub intensity: f64,
}

/// Static phantom geometry, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub h: usize,
    pub w: usize,
    /// Ring centre `(x, y)`.
    pub center: (f64, f64),
    /// Body ellipse semi-axes `(a_x, a_y)`, centred on the ring.
    pub body_axes: (f64, f64),
    pub body_intensity: f64,
    pub ring_inner: f64,
    pub ring_outer: f64,
    pub ring_intensity: f64,
    pub pool_intensity: f64,
    pub discs: Vec<Disc>,
    /// Subsamples per pixel axis.
    pub supersample: usize,
    pub seed: u64,
}

impl PhantomSpec {
    /// Fixed reference phantom on an `h × w` grid.
    pub fn new(h: usize, w: usize) -> Self {
        let s = h.min(w) as f64;
        PhantomSpec {
            h,
            w,
            center: ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0),
            body_axes: (0.42 * w as f64, 0.36 * h as f64),
            body_intensity: 0.3,
            ring_inner: 0.14 * s,
            ring_outer: 0.22 * s,
            ring_intensity: 0.6,
            pool_intensity: 0.95,
            discs: vec![
                Disc {
                    angle: 0.6,
                    offset: 0.65,
                    radius: 0.035 * s,
                    intensity: 0.55,
                },
                Disc {
                    angle: 2.4,
                    offset: 0.65,
                    radius: 0.03 * s,
                    intensity: 0.55,
                },
            ],
            supersample: 4,
            seed: 0,
        }
    }

    /// Reference phantom with randomised placement, sizes and contrasts.
    pub fn random(h: usize, w: usize, seed: u64, rng: &mut impl Rng) -> Self {
        let s = h.min(w) as f64;
        let mut spec = PhantomSpec::new(h, w);
        spec.seed = seed;
        spec.center.0 += rng.random_range(-0.04..0.04) * w as f64;
        spec.center.1 += rng.random_range(-0.04..0.04) * h as f64;
        spec.body_axes.0 *= rng.random_range(0.9..1.05);
        spec.body_axes.1 *= rng.random_range(0.9..1.05);
        spec.ring_inner = rng.random_range(0.12..0.16) * s;
        spec.ring_outer = spec.ring_inner + rng.random_range(0.06..0.09) * s;
        spec.body_intensity = rng.random_range(0.2..0.4);
        spec.ring_intensity = rng.random_range(0.5..0.7);
        spec.pool_intensity = rng.random_range(0.85..1.0);
        let n = rng.random_range(1..=3);
        spec.discs = (0..n)
            .map(|_| Disc {
                angle: rng.random_range(0.0..2.0 * PI),
                offset: rng.random_range(0.5..0.7),
                radius: rng.random_range(0.025..0.04) * s,
                intensity: rng.random_range(0.45..0.7),
            })
            .collect();
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let (cx, cy) = self.center;
        let (ax, ay) = self.body_axes;
        let inside = |x: f64, y: f64| x >= 0.0 && y >= 0.0 && x <= self.w as f64 - 1.0 && y <= self.h as f64 - 1.0;
        if self.h < 8 || self.w < 8 || self.supersample == 0 {
            return Err(Error::config("phantom grid must be at least 8×8 with supersample ≥ 1"));
        }
        if !(inside(cx - ax, cy - ay) && inside(cx + ax, cy + ay)) {
            return Err(Error::config("phantom body leaves the grid"));
        }
        if !(0.0 < self.ring_inner && self.ring_inner < self.ring_outer && self.ring_outer < ax.min(ay)) {
            return Err(Error::config("ring radii must satisfy 0 < inner < outer < body axes"));
        }
        for d in &self.discs {
            if !(d.radius > 0.0 && d.offset * self.ring_inner + d.radius <= self.ring_inner) {
                return Err(Error::config("discs must lie inside the ring"));
            }
        }
        let levels = [self.body_intensity, self.ring_intensity, self.pool_intensity];
        if levels.iter().chain(self.discs.iter().map(|d| &d.intensity)).any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("phantom intensities must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Intensity of the undeformed phantom at `(x, y)`.
    fn value_at(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (ax, ay) = self.body_axes;
        if (dx / ax).powi(2) + (dy / ay).powi(2) > 1.0 {
            return 0.0;
        }
        let r = dx.hypot(dy);
        if r > self.ring_outer {
            return self.body_intensity;
        }
        if r >= self.ring_inner {
            return self.ring_intensity;
        }
        for d in &self.discs {
            let px = d.offset * self.ring_inner * d.angle.cos();
            let py = d.offset * self.ring_inner * d.angle.sin();
            if (dx - px).hypot(dy - py) <= d.radius {
                return d.intensity;
            }
        }
        self.pool_intensity
    }
}

/// Smooth radial contraction around the ring centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformSpec {
    /// Peak relative contraction.
    pub amplitude: f64,
    /// Phase offset in `[0, 1)`.
    pub phase: f64,
    /// Width of the Gaussian envelope, in pixels.
    pub sigma_d: f64,
    /// Anisotropy: the x and y contractions are scaled by `1 ± anisotropy`.
    pub anisotropy: f64,
    pub seed: u64,
}

impl DeformSpec {
    pub fn new(h: usize, w: usize) -> Self {
        DeformSpec {
            amplitude: 0.1,
            phase: 0.0,
            sigma_d: 0.3 * h.min(w) as f64,
            anisotropy: 0.0,
            seed: 0,
        }
    }

    pub fn random(h: usize, w: usize, amplitude: f64, seed: u64, rng: &mut impl Rng) -> Self {
        DeformSpec {
            amplitude,
            phase: rng.random_range(0.0..1.0),
            sigma_d: rng.random_range(0.25..0.35) * h.min(w) as f64,
            anisotropy: rng.random_range(-0.3..0.3),
            seed,
        }
    }

    /// Bound on the displacement of any point at any phase.
    pub fn max_displacement(&self) -> f64 {
        self.amplitude * (1.0 + self.anisotropy.abs()) * self.sigma_d * (-0.5f64).exp()
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.sigma_d > 0.0 && (0.0..1.0).contains(&self.phase)) {
            return Err(Error::config("deformation needs amplitude ≥ 0, σ_d > 0 and phase in [0, 1)"));
        }
        if !(self.anisotropy.abs() < 1.0) {
            return Err(Error::config("anisotropy must lie in (−1, 1)"));
        }
        // Keeps the radial profile monotone, so the map stays invertible.
        if self.amplitude * (1.0 + self.anisotropy.abs()) >= 2.0 {
            return Err(Error::config("contraction amplitude too large"));
        }
        if self.max_displacement() >= 0.25 * h.min(w) as f64 {
            return Err(Error::config("deformation exceeds a quarter of the grid"));
        }
        Ok(())
    }

    /// Contraction level in `[0, 1]` at cardiac phase `p`.
    pub fn level(&self, p: f64) -> f64 {
        0.5 * (1.0 - (2.0 * PI * (p + self.phase)).cos())
    }

    /// Where the rest-phase phantom is sampled to render `(x, y)` at phase `p`.
    fn pullback(&self, center: (f64, f64), x: f64, y: f64, p: f64) -> (f64, f64) {
        let (dx, dy) = (x - center.0, y - center.1);
        let e = (-(dx * dx + dy * dy) / (2.0 * self.sigma_d * self.sigma_d)).exp();
        let a = self.amplitude * self.level(p) * e;
        (
            center.0 + dx * (1.0 + a * (1.0 + self.anisotropy)),
            center.1 + dy * (1.0 + a * (1.0 - self.anisotropy)),
        )
    }
}

/// Renders the phantom at cardiac phase `phase`, averaging
/// `supersample²` point samples per pixel.
pub fn render_phantom(spec: &PhantomSpec, deform: &DeformSpec, phase: f64) -> Result<Tensor> {
    spec.validate()?;
    deform.validate(spec.h, spec.w)?;
    let n = spec.supersample;
    let inv = 1.0 / (n * n) as f64;
    let offsets: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) / n as f64 - 0.5).collect();
    let mut out = Tensor::zeros(&[spec.h, spec.w]);
    let d = out.data_mut();
    for i in 0..spec.h {
        for j in 0..spec.w {
            let mut acc = 0.0;
            for oy in &offsets {
                for ox in &offsets {
                    let (sx, sy) = deform.pullback(spec.center, j as f64 + ox, i as f64 + oy, phase);
                    acc += spec.value_at(sx, sy);
                }
            }
            d[i * spec.w + j] = acc * inv;
        }
    }
    Ok(out)
}

/// Template `g` at `phases.0` and target `f` at `phases.1`.
pub fn make_pair(spec: &PhantomSpec, deform: &DeformSpec, phases: (f64, f64)) -> Result<(Tensor, Tensor)> {
    Ok((render_phantom(spec, deform, phases.0)?, render_phantom(spec, deform, phases.1)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lddmm::{lddmm_register, GaussianKernel, IntegratorConfig, KernelConfig, RegisterOptions, VariationalWeights};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ring_pixels(img: &Tensor, spec: &PhantomSpec) -> usize {
        // Ring pixels are the only ones within 0.05 of the ring level.
        img.data().iter().filter(|v| (*v - spec.ring_intensity).abs() < 0.05).count()
    }

    #[test]
    fn rendering_is_deterministic_and_bounded() {
        let spec = PhantomSpec::new(64, 64);
        let deform = DeformSpec::new(64, 64);
        let a = render_phantom(&spec, &deform, 0.3).unwrap();
        assert_eq!(a, render_phantom(&spec, &deform, 0.3).unwrap());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.max_abs() > 0.9);
    }

    #[test]
    fn zero_amplitude_freezes_phases() {
        let spec = PhantomSpec::new(32, 32);
        let deform = DeformSpec {
            amplitude: 0.0,
            ..DeformSpec::new(32, 32)
        };
        let a = render_phantom(&spec, &deform, 0.0).unwrap();
        for p in [0.25, 0.5, 0.9] {
            assert_eq!(a, render_phantom(&spec, &deform, p).unwrap());
        }
    }

    #[test]
    fn ring_shrinks_at_peak_contraction() {
        let spec = PhantomSpec::new(64, 64);
        let deform = DeformSpec::new(64, 64);
        let rest = render_phantom(&spec, &deform, 0.0).unwrap();
        let peak = render_phantom(&spec, &deform, 0.5).unwrap();
        assert!(ring_pixels(&peak, &spec) < ring_pixels(&rest, &spec));
    }

    #[test]
    fn pair_properties() {
        let spec = PhantomSpec::new(64, 64);
        let deform = DeformSpec::new(64, 64);
        let (g, f) = make_pair(&spec, &deform, (0.2, 0.2)).unwrap();
        assert_eq!(g, f);
        let (g, f) = make_pair(&spec, &deform, (0.2, 0.2 + 1.0 / 24.0)).unwrap();
        let d = g.max_abs_diff(&f).unwrap();
        assert!(d > 0.0 && d < 0.5, "{d}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = PhantomSpec::new(32, 32);
        spec.ring_intensity = 1.5;
        assert!(spec.validate().is_err());
        let mut spec = PhantomSpec::new(32, 32);
        spec.body_axes = (40.0, 10.0);
        assert!(spec.validate().is_err());
        let deform = DeformSpec {
            amplitude: 1.9,
            sigma_d: 30.0,
            ..DeformSpec::new(32, 32)
        };
        assert!(deform.validate(32, 32).is_err());
    }

    #[test]
    fn random_specs_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in 0..50 {
            PhantomSpec::random(64, 64, s, &mut rng).validate().unwrap();
            DeformSpec::random(64, 64, 0.1, s, &mut rng).validate(64, 64).unwrap();
        }
    }

    #[test]
    fn default_pair_registers_to_a_tenth_of_the_ssd() {
        let spec = PhantomSpec::new(64, 64);
        let deform = DeformSpec::new(64, 64);
        let (g, f) = make_pair(&spec, &deform, (0.0, 0.5)).unwrap();
        let kernel = GaussianKernel::new(KernelConfig::for_grid(64, 64), 64, 64).unwrap();
        let reg = lddmm_register(
            &f,
            &g,
            &VariationalWeights {
                sigma_reg: 0.03,
                ..VariationalWeights::default()
            },
            &kernel,
            &IntegratorConfig::default(),
            &RegisterOptions::default(),
        )
        .unwrap();
        assert!(reg.final_ssd <= 0.1 * reg.initial_ssd, "{} vs {}", reg.final_ssd, reg.initial_ssd);
    }
}
