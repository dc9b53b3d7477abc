//! First-order refinement of the Gaussian map against keyframe observations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::mapping_loss_with_grad;
use super::render::{backward, render, render_with_cache, GaussianGrad};
use super::{mapping_loss, scale_normalization, CameraModel, GaussianMap, MapGaussian, MappingConfig};
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::se3::{Rotation, Vec3};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Gradient components below this are rounding noise; Adam's scale
/// invariance would otherwise turn them into full-size steps.
const GRAD_FLOOR: f64 = 1e-12;

/// An observed frame with its tracked camera.
#[derive(Clone, Debug, PartialEq)]
pub struct MappingKeyframe {
    pub camera: CameraModel,
    pub rgb: Image,
    pub depth: Image,
}

#[derive(Clone, Default)]
struct Moments {
    m: Vec<[f64; 13]>,
    v: Vec<[f64; 13]>,
}

fn flatten(g: &GaussianGrad) -> [f64; 13] {
    [
        g.mean.x, g.mean.y, g.mean.z, g.color.x, g.color.y, g.color.z, g.opacity, g.scales.x, g.scales.y,
        g.scales.z, g.rotation.x, g.rotation.y, g.rotation.z,
    ]
}

fn learning_rates(cfg: &MappingConfig) -> [f64; 13] {
    let mut lr = [0.0; 13];
    lr[0..3].fill(cfg.lr_mean);
    lr[3..6].fill(cfg.lr_color);
    lr[6] = cfg.lr_opacity;
    lr[7..10].fill(cfg.lr_scale);
    lr[10..13].fill(cfg.lr_rotation);
    lr
}

fn apply_step(g: &mut MapGaussian, step: &[f64; 13]) {
    g.mean -= Vec3::new(step[0], step[1], step[2]);
    g.color -= Vec3::new(step[3], step[4], step[5]);
    g.opacity -= step[6];
    g.scales -= Vec3::new(step[7], step[8], step[9]);
    let delta = -Vec3::new(step[10], step[11], step[12]);
    if delta != Vec3::zeros() {
        g.orientation = &g.orientation * &Rotation::exp(&delta);
    }
    g.clamp_to_bounds();
}

/// Refine every Gaussian for `cfg.iterations_per_keyframe` steps, each
/// against one keyframe drawn from a seeded shuffled cycle over the most
/// recent `cfg.window` keyframes. Low-opacity Gaussians are pruned and scales
/// normalized afterwards. Returns the per-step loss.
pub fn optimize_map(map: &mut GaussianMap, keyframes: &[MappingKeyframe], cfg: &MappingConfig) -> Result<Vec<f64>> {
    if keyframes.is_empty() {
        return Err(Error::invalid("map optimization needs at least one keyframe"));
    }
    cfg.validate()?;
    let active = if cfg.window == 0 || cfg.window >= keyframes.len() {
        keyframes
    } else {
        &keyframes[keyframes.len() - cfg.window..]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (keyframes.len() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut cycle: Vec<usize> = Vec::new();
    let lr = learning_rates(cfg);
    let mut moments = Moments {
        m: vec![[0.0; 13]; map.len()],
        v: vec![[0.0; 13]; map.len()],
    };
    let mut trace = Vec::with_capacity(cfg.iterations_per_keyframe);

    for t in 1..=cfg.iterations_per_keyframe {
        if cycle.is_empty() {
            cycle = (0..active.len()).collect();
            cycle.shuffle(&mut rng);
            cycle.reverse();
        }
        let kf = &active[cycle.pop().expect("cycle refilled above")];
        let (out, cache) = render_with_cache(map, &kf.camera);
        let (loss, grad) = mapping_loss_with_grad(&out, &kf.rgb, &kf.depth, cfg)?;
        trace.push(loss.total);
        let grads = backward(map, &kf.camera, &cache, &grad.color, &grad.depth, None);

        let c1 = 1.0 - BETA1.powi(t as i32);
        let c2 = 1.0 - BETA2.powi(t as i32);
        for (i, g) in grads.iter().enumerate() {
            let flat = flatten(g).map(|v| if v.abs() < GRAD_FLOOR { 0.0 } else { v });
            let (m, v) = (&mut moments.m[i], &mut moments.v[i]);
            let mut step = [0.0; 13];
            for j in 0..13 {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * flat[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * flat[j] * flat[j];
                step[j] = lr[j] * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            }
            apply_step(&mut map.gaussians[i], &step);
        }
    }

    map.prune(cfg.prune_opacity);
    scale_normalization(map);
    Ok(trace)
}

/// Largest relative disagreement between analytic and central-difference
/// gradients, per parameter group.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradientCheck {
    pub color: f64,
    pub opacity: f64,
    pub mean: f64,
    pub scales: f64,
    pub rotation: f64,
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn loss_at(map: &GaussianMap, kf: &MappingKeyframe, cfg: &MappingConfig) -> Result<f64> {
    Ok(mapping_loss(&render(map, &kf.camera), &kf.rgb, &kf.depth, cfg)?.total)
}

/// Compare analytic gradients of the mapping loss with central differences
/// of step `h` for every parameter of every Gaussian.
pub fn verify_gradients(map: &GaussianMap, kf: &MappingKeyframe, cfg: &MappingConfig, h: f64) -> Result<GradientCheck> {
    let (out, cache) = render_with_cache(map, &kf.camera);
    let (_, grad) = mapping_loss_with_grad(&out, &kf.rgb, &kf.depth, cfg)?;
    let grads = backward(map, &kf.camera, &cache, &grad.color, &grad.depth, None);

    let mut check = GradientCheck::default();
    let central = |edit: &dyn Fn(&mut MapGaussian, f64), i: usize| -> Result<f64> {
        let mut plus = map.clone();
        edit(&mut plus.gaussians[i], h);
        let mut minus = map.clone();
        edit(&mut minus.gaussians[i], -h);
        Ok((loss_at(&plus, kf, cfg)? - loss_at(&minus, kf, cfg)?) / (2.0 * h))
    };
    for (i, g) in grads.iter().enumerate() {
        for axis in 0..3 {
            let fd = central(&|p, d| p.color[axis] += d, i)?;
            check.color = check.color.max(relative_error(g.color[axis], fd));
            let fd = central(&|p, d| p.mean[axis] += d, i)?;
            check.mean = check.mean.max(relative_error(g.mean[axis], fd));
            let fd = central(&|p, d| p.scales[axis] += d, i)?;
            check.scales = check.scales.max(relative_error(g.scales[axis], fd));
            let fd = central(
                &|p, d| p.orientation = &p.orientation * &Rotation::exp(&Vec3::ith(axis, d)),
                i,
            )?;
            check.rotation = check.rotation.max(relative_error(g.rotation[axis], fd));
        }
        let fd = central(&|p, d| p.opacity += d, i)?;
        check.opacity = check.opacity.max(relative_error(g.opacity, fd));
    }
    Ok(check)
}
