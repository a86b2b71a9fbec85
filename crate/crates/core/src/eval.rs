//! Image quality metrics, metric tables and PNG previews.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Intensity scale of absolute-error maps.
pub const ERROR_MAP_GAIN: f64 = 5.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// `10·log10(peak²/MSE)`; identical images give `+∞`.
pub fn psnr(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    x.same_shape(reference, "psnr")?;
    let mse = x.sub(reference)?.norm_sq() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|k| (-(k as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(k, t)| t * img[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(k, t)| t * rows[(i + k) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity over all fully contained 11×11 Gaussian
/// windows (σ = 1.5), with constants `(0.01·peak)²` and `(0.03·peak)²`.
pub fn ssim(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    x.same_shape(reference, "ssim")?;
    if x.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "ssim needs a 2-D image".into(),
        });
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "image smaller than the 11×11 ssim window".into(),
        });
    }
    let taps = gaussian_taps();
    let (a, b) = (x.data(), reference.data());
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let aa = filter_valid(&prod(a, a), h, w, &taps);
    let bb = filter_valid(&prod(b, b), h, w, &taps);
    let ab = filter_valid(&prod(a, b), h, w, &taps);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let mut total = 0.0;
    for k in 0..mu_a.len() {
        let (ma, mb) = (mu_a[k], mu_b[k]);
        let va = aa[k] - ma * ma;
        let vb = bb[k] - mb * mb;
        let cov = ab[k] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Writes an 8-bit grayscale PNG, mapping `[0, 1]` linearly and clamping.
pub fn write_png(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if img.rank() != 2 {
        return Err(Error::InvalidShape {
            shape: img.shape().to_vec(),
            reason: "png output needs a 2-D image".into(),
        });
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let bytes: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    enc.write_header().map_err(fail)?.write_image_data(&bytes).map_err(fail)
}

/// `min(|u − f|·gain, 1)` with a grayscale bar on the right running from 0 (bottom)
/// to `1/gain` (top).
pub fn error_map(u: &Tensor, f: &Tensor, gain: f64) -> Result<Tensor> {
    u.same_shape(f, "error_map")?;
    let (h, w) = (u.shape()[0], u.shape()[1]);
    let bar = 4;
    let err = u.sub(f)?;
    let mut out = Tensor::zeros(&[h, w + 2 + bar]);
    let od = out.data_mut();
    for i in 0..h {
        for j in 0..w {
            od[i * (w + 2 + bar) + j] = (err.data()[i * w + j].abs() * gain).min(1.0);
        }
        let level = if h > 1 { 1.0 - i as f64 / (h - 1) as f64 } else { 1.0 };
        for j in w + 2..w + 2 + bar {
            od[i * (w + 2 + bar) + j] = level;
        }
    }
    Ok(out)
}

/// Legend line for maps produced by [`error_map`].
pub fn error_map_legend(gain: f64) -> String {
    format!("error maps: |u - f| x {gain}; colour bar black = 0, white = {:.3}", 1.0 / gain)
}

/// One evaluated reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub sample: usize,
    pub method: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub seconds: Option<f64>,
}

/// Per-sample metrics with per-method means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    pub fn push(&mut self, sample: usize, method: &str, u: &Tensor, f: &Tensor, seconds: Option<f64>) -> Result<()> {
        self.rows.push(MetricRow {
            sample,
            method: method.to_string(),
            psnr_db: psnr(u, f, 1.0)?,
            ssim: ssim(u, f, 1.0)?,
            seconds,
        });
        Ok(())
    }

    /// Methods in order of first appearance.
    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    /// Mean `(psnr, ssim, seconds)` of one method.
    pub fn mean(&self, method: &str) -> Option<(f64, f64, Option<f64>)> {
        let rows: Vec<&MetricRow> = self.rows.iter().filter(|r| r.method == method).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let psnr = rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        let ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        let secs: Option<Vec<f64>> = rows.iter().map(|r| r.seconds).collect();
        Some((psnr, ssim, secs.map(|s| s.iter().sum::<f64>() / n)))
    }

    /// `sample,method,psnr_db,ssim,seconds` with one `mean` row per method.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,method,psnr_db,ssim,seconds\n");
        let secs = |v: Option<f64>| v.map(fmt_num).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.sample,
                r.method,
                fmt_num(r.psnr_db),
                fmt_num(r.ssim),
                secs(r.seconds)
            );
        }
        for m in self.methods() {
            let (p, q, t) = self.mean(&m).expect("method present");
            let _ = writeln!(s, "mean,{m},{},{},{}", fmt_num(p), fmt_num(q), secs(t));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn psnr_cases() {
        let a = random(16, 16, 0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&b, &a, 1.0).unwrap() - 20.0).abs() < 1e-12);
        let c = random(16, 16, 1);
        let mut sq = 0.0;
        for (p, q) in a.data().iter().zip(c.data()) {
            sq += (p - q) * (p - q);
        }
        let oracle = 10.0 * (1.0 / (sq / 256.0)).log10();
        assert!((psnr(&c, &a, 1.0).unwrap() - oracle).abs() < 1e-12);
        assert_eq!(psnr(&c, &a, 1.0).unwrap(), psnr(&a, &c, 1.0).unwrap());
    }

    /// Direct per-window evaluation.
    fn ssim_naive(x: &Tensor, y: &Tensor) -> f64 {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let mut win = [[0.0; 11]; 11];
        let mut s = 0.0;
        for (a, row) in win.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                *v = (-(((a as f64 - 5.0).powi(2) + (b as f64 - 5.0).powi(2)) / 4.5)).exp();
                s += *v;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..=h - 11 {
            for j in 0..=w - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in 0..11 {
                    for b in 0..11 {
                        let wt = win[a][b] / s;
                        let p = x.data()[(i + a) * w + j + b];
                        let q = y.data()[(i + a) * w + j + b];
                        mx += wt * p;
                        my += wt * q;
                        xx += wt * p * p;
                        yy += wt * q * q;
                        xy += wt * p * q;
                    }
                }
                let (vx, vy, cv) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cv + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn ssim_matches_windowed_oracle() {
        let board = Tensor::from_fn(&[24, 20], |k| (((k / 20) / 3 + (k % 20) / 3) % 2) as f64);
        let blurred = Tensor::from_fn(&[24, 20], |k| {
            let (i, j) = ((k / 20) as i64, (k % 20) as i64);
            let mut acc = 0.0;
            for (di, dj) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (a, b) = ((i + di).clamp(0, 23), (j + dj).clamp(0, 19));
                acc += board.data()[(a * 20 + b) as usize];
            }
            acc / 5.0
        });
        let fast = ssim(&blurred, &board, 1.0).unwrap();
        assert!((fast - ssim_naive(&blurred, &board)).abs() < 1e-9);
        assert!(fast < 1.0);
    }

    #[test]
    fn ssim_identity_inversion_and_symmetry() {
        let a = random(16, 16, 2);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&inv, &a, 1.0).unwrap() < 1.0);
        let b = random(16, 16, 3);
        assert_eq!(ssim(&a, &b, 1.0).unwrap(), ssim(&b, &a, 1.0).unwrap());
        assert!(ssim(&random(8, 16, 0), &random(8, 16, 1), 1.0).is_err());
    }

    #[test]
    fn report_csv_has_mean_rows() {
        let f = random(12, 12, 4);
        let mut r = MetricReport::default();
        r.push(0, "tv", &f.map(|v| v * 0.9), &f, None).unwrap();
        r.push(1, "tv", &f.map(|v| v * 0.8), &f, None).unwrap();
        r.push(0, "net-output", &f, &f, Some(0.5)).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "sample,method,psnr_db,ssim,seconds");
        assert_eq!(lines.len(), 1 + 3 + 2);
        assert!(lines[3].starts_with("0,net-output,inf,1.000000,0.500000"));
        assert!(lines[4].starts_with("mean,tv,"));
    }

    #[test]
    fn png_and_error_map() {
        let dir = tempfile::tempdir().unwrap();
        let f = random(10, 12, 5);
        let u = f.map(|v| v + 0.1);
        let e = error_map(&u, &f, ERROR_MAP_GAIN).unwrap();
        assert_eq!(e.shape(), &[10, 12 + 6]);
        assert!((e.data()[0] - 0.5).abs() < 1e-12);
        write_png(dir.path().join("e.png"), &e).unwrap();
        let bytes = fs::read(dir.path().join("e.png")).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}
