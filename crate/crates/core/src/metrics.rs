//! Trajectory and image quality metrics: ATE RMSE, PSNR and SSIM.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::SVD;

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::se3::{Mat3, Pose, Rotation, Vec3};

/// Maximum timestamp difference for associating two trajectory entries.
pub const ASSOCIATION_WINDOW: f64 = 0.02;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_RADIUS: usize = 5;
const SSIM_WINDOW: usize = 2 * SSIM_RADIUS + 1;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Timestamped poses with strictly increasing timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    entries: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, Pose)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("trajectory needs at least one pose"));
        }
        for w in entries.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::Ordering(format!(
                    "trajectory timestamp {} does not follow {}",
                    w[1].0, w[0].0
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(f64, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total distance travelled by the positions.
    pub fn path_length(&self) -> f64 {
        self.entries
            .windows(2)
            .map(|w| (w[1].1.translation - w[0].1.translation).norm())
            .sum()
    }

    /// Entry whose timestamp is closest to `t`, if within `window`.
    pub fn nearest(&self, t: f64, window: f64) -> Option<&(f64, Pose)> {
        let i = self.entries.partition_point(|e| e.0 < t);
        let candidates = [i.checked_sub(1), Some(i)];
        candidates
            .iter()
            .flatten()
            .filter_map(|&j| self.entries.get(j))
            .filter(|e| (e.0 - t).abs() <= window)
            .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()))
    }

    /// Parse TUM lines `timestamp tx ty tz qx qy qz qw`; `#` starts a comment.
    pub fn parse_tum(text: &str, source: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let values: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(format!("{source}:{}", n + 1), format!("{e}")))?;
            if values.len() != 8 {
                return Err(Error::parse(
                    format!("{source}:{}", n + 1),
                    format!("expected 8 values, got {}", values.len()),
                ));
            }
            let pose = Pose::from_tum(&values[1..])
                .map_err(|e| Error::parse(format!("{source}:{}", n + 1), e.to_string()))?;
            entries.push((values[0], pose));
        }
        Self::new(entries)
    }

    pub fn load_tum(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingAsset(vec![path.to_path_buf()]));
        }
        let text = std::fs::read_to_string(path)?;
        Self::parse_tum(&text, &path.display().to_string())
    }

    /// TUM text with 6 decimal places.
    pub fn to_tum_string(&self) -> String {
        let mut out = String::new();
        for (t, pose) in &self.entries {
            let v = pose.to_tum();
            writeln!(
                out,
                "{t:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
                v[0], v[1], v[2], v[3], v[4], v[5], v[6]
            )
            .unwrap();
        }
        out
    }

    pub fn save_tum(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tum_string())?;
        Ok(())
    }
}

/// Rotation and translation minimizing `Σ |dst_i − (R src_i + t)|²`.
pub fn umeyama_rigid(src: &[Vec3], dst: &[Vec3]) -> Pose {
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vec3>() / n;
    let md = dst.iter().sum::<Vec3>() / n;
    let h = src
        .iter()
        .zip(dst)
        .fold(Mat3::zeros(), |acc, (s, d)| acc + (s - ms) * (d - md).transpose());
    let svd = SVD::new(h, true, true);
    let u = svd.u.unwrap();
    let v = svd.v_t.unwrap().transpose();
    let mut fix = Mat3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = v * fix * u.transpose();
    let rotation = Rotation::from_matrix(&r).expect("SVD yields a proper rotation");
    let t = md - rotation.rotate(&ms);
    Pose::new(rotation, t)
}

/// Position RMSE between associated poses, optionally after the best rigid
/// alignment of `estimated` onto `reference`. Returns the alignment used.
pub fn ate_rmse(estimated: &Trajectory, reference: &Trajectory, align: bool) -> Result<(f64, Pose)> {
    let (est, gt): (Vec<Vec3>, Vec<Vec3>) = estimated
        .entries
        .iter()
        .filter_map(|(t, pose)| {
            reference
                .nearest(*t, ASSOCIATION_WINDOW)
                .map(|(_, r)| (pose.translation, r.translation))
        })
        .unzip();
    if est.len() < 3 {
        return Err(Error::InsufficientOverlap { pairs: est.len() });
    }
    let alignment = if align { umeyama_rigid(&est, &gt) } else { Pose::identity() };
    let sq: f64 = est
        .iter()
        .zip(&gt)
        .map(|(e, g)| (g - alignment.transform_point(e)).norm_squared())
        .sum();
    Ok(((sq / est.len() as f64).sqrt(), alignment))
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if a.data.is_empty() {
        return Err(Error::invalid("empty images"));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64)
}

/// `10·log10(peak²/MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::invalid("PSNR peak must be positive"));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable Gaussian filter keeping only fully-inside windows.
fn filter_valid(src: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - 2 * SSIM_RADIUS, h - 2 * SSIM_RADIUS);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| g[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads window values back onto pixels.
fn filter_adjoint(src: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - 2 * SSIM_RADIUS, h - 2 * SSIM_RADIUS);
    let mut cols = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for i in 0..SSIM_WINDOW {
                cols[(y + i) * ow + x] += g[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = cols[y * ow + x];
            for i in 0..SSIM_WINDOW {
                out[y * w + x + i] += g[i] * v;
            }
        }
    }
    out
}

fn check_ssim_inputs(a: &Image, b: &Image) -> Result<()> {
    a.ensure_same_shape(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.width, a.height
        )));
    }
    Ok(())
}

/// Mean SSIM over all fully-inside 11×11 Gaussian windows, averaged over
/// channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_impl(a, b, false).map(|(s, _)| s)
}

/// SSIM together with its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    ssim_impl(a, b, true).map(|(s, g)| (s, g.expect("gradient requested")))
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check_ssim_inputs(a, b)?;
    let (w, h, ch) = (a.width, a.height, a.channels);
    let g = ssim_kernel();
    let windows = ((w - 2 * SSIM_RADIUS) * (h - 2 * SSIM_RADIUS)) as f64;
    let norm = 1.0 / (windows * ch as f64);
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h, ch));

    for c in 0..ch {
        let x: Vec<f64> = (0..w * h).map(|i| a.data[i * ch + c]).collect();
        let y: Vec<f64> = (0..w * h).map(|i| b.data[i * ch + c]).collect();
        let sq = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter_valid(&x, w, h, &g);
        let my = filter_valid(&y, w, h, &g);
        let exx = filter_valid(&sq(&x, &x), w, h, &g);
        let eyy = filter_valid(&sq(&y, &y), w, h, &g);
        let exy = filter_valid(&sq(&x, &y), w, h, &g);

        let n = mx.len();
        let (mut pm, mut pxx, mut pxy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let a1 = 2.0 * mx[i] * my[i] + SSIM_C1;
            let a2 = 2.0 * (exy[i] - mx[i] * my[i]) + SSIM_C2;
            let b1 = mx[i] * mx[i] + my[i] * my[i] + SSIM_C1;
            let b2 = (exx[i] - mx[i] * mx[i]) + (eyy[i] - my[i] * my[i]) + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s * norm;
            if want_grad {
                pm[i] = norm
                    * ((2.0 * my[i] * a2 - 2.0 * my[i] * a1) / (b1 * b2) - s * (2.0 * mx[i] / b1 - 2.0 * mx[i] / b2));
                pxx[i] = -norm * s / b2;
                pxy[i] = norm * 2.0 * a1 / (b1 * b2);
            }
        }
        if let Some(grad) = grad.as_mut() {
            let am = filter_adjoint(&pm, w, h, &g);
            let axx = filter_adjoint(&pxx, w, h, &g);
            let axy = filter_adjoint(&pxy, w, h, &g);
            for q in 0..w * h {
                grad.data[q * ch + c] = am[q] + 2.0 * x[q] * axx[q] + y[q] * axy[q];
            }
        }
    }
    Ok((total, grad))
}

/// Tracking and rendering quality summary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub ate_rmse: Option<f64>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub frame_count: usize,
    /// Named wall-clock totals in seconds.
    pub runtime: Vec<(String, f64)>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricsReport {
    pub fn mean_psnr(&self) -> Option<f64> {
        mean(&self.psnr)
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        mean(&self.ssim)
    }

    /// One `name=value` line per metric.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        writeln!(out, "frame_count={}", self.frame_count).unwrap();
        if let Some(ate) = self.ate_rmse {
            writeln!(out, "ate_rmse={ate:.6}").unwrap();
        }
        if let Some(p) = self.mean_psnr() {
            writeln!(out, "psnr_mean={p:.6}").unwrap();
        }
        if let Some(s) = self.mean_ssim() {
            writeln!(out, "ssim_mean={s:.6}").unwrap();
        }
        for (i, p) in self.psnr.iter().enumerate() {
            writeln!(out, "psnr_{i}={p:.6}").unwrap();
        }
        for (i, s) in self.ssim.iter().enumerate() {
            writeln!(out, "ssim_{i}={s:.6}").unwrap();
        }
        for (name, secs) in &self.runtime {
            writeln!(out, "runtime_{name}_s={secs:.6}").unwrap();
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_key_values())?;
        Ok(())
    }
}
