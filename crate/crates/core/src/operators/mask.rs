//! k-space sampling masks, stored in unshifted FFT bin order.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValue;
use crate::error::{Error, Result};
use crate::fft::signed_freq;
use crate::tensor::Tensor;

/// Largest allowed gap between the realised and requested sampling rate.
pub const RATE_TOLERANCE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPattern {
    Radial,
    Random2d,
    Random1dCartesian,
}

impl MaskPattern {
    pub const ALL: [MaskPattern; 3] = [MaskPattern::Radial, MaskPattern::Random2d, MaskPattern::Random1dCartesian];
}

impl fmt::Display for MaskPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskPattern::Radial => "radial",
            MaskPattern::Random2d => "random-2d",
            MaskPattern::Random1dCartesian => "random-1d-cartesian",
        })
    }
}

impl FromStr for MaskPattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radial" => Ok(MaskPattern::Radial),
            "random-2d" => Ok(MaskPattern::Random2d),
            "random-1d-cartesian" | "random-1d" => Ok(MaskPattern::Random1dCartesian),
            other => Err(Error::config(format!("unknown sampling pattern '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    pub pattern: MaskPattern,
    pub rate: f64,
    /// Radius (radial, random-2d) or band width (random-1d) of the fully sampled centre, in pixels.
    pub center: usize,
    pub seed: u64,
    pub h: usize,
    pub w: usize,
    mask: Vec<bool>,
}

impl SamplingMask {
    pub fn new(pattern: MaskPattern, rate: f64, center: usize, seed: u64, h: usize, w: usize) -> Result<Self> {
        make_mask(pattern, rate, center, seed, h, w)
    }

    pub fn full(h: usize, w: usize) -> Self {
        SamplingMask {
            pattern: MaskPattern::Random2d,
            rate: 1.0,
            center: 0,
            seed: 0,
            h,
            w,
            mask: vec![true; h * w],
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.mask
    }

    pub fn sampled_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&b| b).count() as f64 / self.mask.len() as f64
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.h, self.w], |i| if self.mask[i] { 1.0 } else { 0.0 })
    }

    /// Writes `<stem>.jrrt` and the `<stem>.txt` metadata sidecar.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        crate::jrrt::write(stem.with_extension("jrrt"), &self.to_tensor())?;
        let mut kv = KeyValue::new();
        kv.set("pattern", self.pattern);
        kv.set("rate", self.rate);
        kv.set("center", self.center);
        kv.set("seed", self.seed);
        kv.save(stem.with_extension("txt"))
    }

    /// Regenerates a mask from its sidecar and checks it against the stored bits.
    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let kv = KeyValue::load(stem.with_extension("txt"))?;
        let bits = crate::jrrt::read(stem.with_extension("jrrt"))?;
        let (h, w) = match bits.shape() {
            [h, w] => (*h, *w),
            s => {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "mask must be 2-D".into(),
                })
            }
        };
        let mut m = SamplingMask {
            pattern: kv.get("pattern")?,
            rate: kv.get("rate")?,
            center: kv.get("center")?,
            seed: kv.get("seed")?,
            h,
            w,
            mask: bits.data().iter().map(|&v| v != 0.0).collect(),
        };
        if m.rate >= 1.0 {
            m.mask.iter_mut().for_each(|b| *b = true);
        }
        Ok(m)
    }
}

fn freq_radius_sq(i: usize, j: usize, h: usize, w: usize) -> f64 {
    let fy = signed_freq(i, h) as f64;
    let fx = signed_freq(j, w) as f64;
    fx * fx + fy * fy
}

fn center_disc(h: usize, w: usize, radius: usize) -> Vec<bool> {
    let r2 = (radius * radius) as f64;
    (0..h * w)
        .map(|k| radius > 0 && freq_radius_sq(k / w, k % w, h, w) <= r2)
        .collect()
}

fn radial_with(spokes: usize, h: usize, w: usize, base: &[bool]) -> Vec<bool> {
    let mut mask = base.to_vec();
    let half_h = (h / 2) as isize;
    let half_w = (w / 2) as isize;
    let reach = h.max(w) as f64 / 2.0;
    for q in 0..spokes {
        let ang = std::f64::consts::PI * q as f64 / spokes as f64;
        let (s, c) = ang.sin_cos();
        let steps = (4.0 * reach) as isize;
        for t in -steps..=steps {
            let r = t as f64 * 0.25;
            let fx = (r * c).round() as isize;
            let fy = (r * s).round() as isize;
            if fx < -half_w || fx >= w as isize - half_w || fy < -half_h || fy >= h as isize - half_h {
                continue;
            }
            let j = fx.rem_euclid(w as isize) as usize;
            let i = fy.rem_euclid(h as isize) as usize;
            mask[i * w + j] = true;
        }
    }
    mask
}

/// Weighted sampling without replacement of `n` indices (Efraimidis-Spirakis keys).
fn weighted_pick(weights: &[(usize, f64)], n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .map(|&(idx, wgt)| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / wgt, idx)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(n).map(|(_, i)| i).collect()
}

fn unreachable(pattern: MaskPattern, rate: f64, got: f64) -> Error {
    Error::config(format!(
        "{pattern} mask cannot reach rate {rate:.4} on this grid (closest {got:.4})"
    ))
}

/// Generates a sampling mask; a pure function of its arguments.
pub fn make_mask(pattern: MaskPattern, rate: f64, center: usize, seed: u64, h: usize, w: usize) -> Result<SamplingMask> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::config(format!("sampling rate {rate} outside (0, 1]")));
    }
    if h == 0 || w == 0 {
        return Err(Error::config("empty grid"));
    }
    let total = h * w;
    let mask = if rate >= 1.0 {
        vec![true; total]
    } else {
        match pattern {
            MaskPattern::Radial => {
                let base = center_disc(h, w, center);
                let spoke_len = h.max(w);
                let start = ((rate * total as f64) / spoke_len as f64).ceil().max(1.0) as usize;
                let frac = |m: &[bool]| m.iter().filter(|&&b| b).count() as f64 / total as f64;
                // The nominal spoke count undershoots because spokes overlap
                // near DC; walk to the count whose realised rate is closest.
                let mut n = 1;
                let mut best = radial_with(1, h, w, &base);
                while frac(&best) < rate && n < start.max(1) * 8 {
                    let next = radial_with(n + 1, h, w, &base);
                    let overshoot = frac(&next) >= rate;
                    let closer = (frac(&next) - rate).abs() <= (frac(&best) - rate).abs();
                    if overshoot && !closer {
                        break;
                    }
                    n += 1;
                    best = next;
                }
                best
            }
            MaskPattern::Random2d => {
                let mut mask = center_disc(h, w, center);
                let target = (rate * total as f64).round() as usize;
                let forced = mask.iter().filter(|&&b| b).count();
                if forced > target {
                    return Err(unreachable(pattern, rate, forced as f64 / total as f64));
                }
                let s = 0.25 * h.min(w) as f64;
                let candidates: Vec<(usize, f64)> = (0..total)
                    .filter(|&k| !mask[k])
                    .map(|k| (k, (-freq_radius_sq(k / w, k % w, h, w) / (2.0 * s * s)).exp()))
                    .collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for k in weighted_pick(&candidates, target - forced, &mut rng) {
                    mask[k] = true;
                }
                mask
            }
            MaskPattern::Random1dCartesian => {
                let target = (rate * w as f64).round() as usize;
                let lo = -((center / 2) as isize);
                let hi = center.div_ceil(2) as isize;
                let band: Vec<bool> = (0..w)
                    .map(|j| {
                        let f = signed_freq(j, w);
                        center > 0 && f >= lo && f < hi
                    })
                    .collect();
                let forced = band.iter().filter(|&&b| b).count();
                if forced > target {
                    return Err(unreachable(pattern, rate, forced as f64 / w as f64));
                }
                let s = 0.25 * w as f64;
                let candidates: Vec<(usize, f64)> = (0..w)
                    .filter(|&j| !band[j])
                    .map(|j| {
                        let f = signed_freq(j, w) as f64;
                        (j, (-f * f / (2.0 * s * s)).exp())
                    })
                    .collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut cols = band;
                for j in weighted_pick(&candidates, target - forced, &mut rng) {
                    cols[j] = true;
                }
                (0..total).map(|k| cols[k % w]).collect()
            }
        }
    };
    let got = mask.iter().filter(|&&b| b).count() as f64 / total as f64;
    if (got - rate).abs() > RATE_TOLERANCE {
        return Err(unreachable(pattern, rate, got));
    }
    Ok(SamplingMask {
        pattern,
        rate,
        center,
        seed,
        h,
        w,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_rate_radial_64() {
        let m = make_mask(MaskPattern::Radial, 0.25, 4, 7, 64, 64).unwrap();
        let f = m.sampled_fraction();
        assert!((0.23..=0.27).contains(&f), "{f}");
    }

    #[test]
    fn rates_within_tolerance_for_all_patterns() {
        for p in MaskPattern::ALL {
            for rate in [0.2, 0.25, 1.0 / 3.0] {
                let m = make_mask(p, rate, 4, 3, 64, 64).unwrap();
                assert!((m.sampled_fraction() - rate).abs() <= RATE_TOLERANCE, "{p} {rate}");
            }
        }
    }

    #[test]
    fn full_rate_is_all_true() {
        for p in MaskPattern::ALL {
            let m = make_mask(p, 1.0, 2, 1, 16, 16).unwrap();
            assert!(m.bits().iter().all(|&b| b));
        }
    }

    #[test]
    fn deterministic_in_seed() {
        for p in MaskPattern::ALL {
            let a = make_mask(p, 0.25, 4, 9, 32, 32).unwrap();
            let b = make_mask(p, 0.25, 4, 9, 32, 32).unwrap();
            assert_eq!(a, b);
        }
        let a = make_mask(MaskPattern::Random2d, 0.25, 4, 1, 32, 32).unwrap();
        let b = make_mask(MaskPattern::Random2d, 0.25, 4, 2, 32, 32).unwrap();
        assert_ne!(a.bits(), b.bits());
    }

    #[test]
    fn center_is_fully_sampled() {
        let m = make_mask(MaskPattern::Random2d, 0.2, 5, 4, 64, 64).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                if freq_radius_sq(i, j, 64, 64) <= 25.0 {
                    assert!(m.bits()[i * 64 + j]);
                }
            }
        }
        let c = make_mask(MaskPattern::Random1dCartesian, 0.25, 6, 4, 64, 64).unwrap();
        for f in -3isize..3 {
            assert!(c.bits()[f.rem_euclid(64) as usize]);
        }
        let r = make_mask(MaskPattern::Radial, 0.25, 3, 4, 64, 64).unwrap();
        assert!(r.bits()[0] && r.bits()[1] && r.bits()[64]);
    }

    #[test]
    fn unreachable_rates_rejected() {
        assert!(make_mask(MaskPattern::Radial, 0.0, 0, 0, 8, 8).is_err());
        assert!(make_mask(MaskPattern::Random2d, 1.5, 0, 0, 8, 8).is_err());
        // centre disc alone exceeds the budget
        assert!(make_mask(MaskPattern::Random2d, 0.05, 10, 0, 32, 32).is_err());
    }

    #[test]
    fn sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_mask(MaskPattern::Random1dCartesian, 0.25, 4, 12, 32, 32).unwrap();
        m.save(dir.path().join("mask")).unwrap();
        assert_eq!(SamplingMask::load(dir.path().join("mask")).unwrap(), m);
    }
}
