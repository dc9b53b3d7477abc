//! Alpha-compositing rasterizer for 3D Gaussians and its reverse-mode
//! derivative.

use std::cmp::Ordering;

use nalgebra::{Matrix2, Matrix2x3, Vector2};

use super::{CameraModel, GaussianMap, MapGaussian};
use crate::raster::Image;
use crate::se3::{skew, Mat3, Vec3};

/// Gaussians closer than this along the optical axis are not drawn.
pub const NEAR_PLANE: f64 = 0.01;
/// Per-pixel alpha ceiling.
pub const ALPHA_MAX: f64 = 1.0 - 1e-7;
/// Gaussians whose peak alpha is below this are culled.
pub const MIN_PEAK_ALPHA: f64 = 1.0 / 255.0;
/// Per-pixel contributions below this are skipped.
const ALPHA_EPS: f64 = 1e-12;
/// Mahalanobis² radius beyond which `exp(−q/2) < ALPHA_EPS`.
const CUTOFF_Q: f64 = 55.0;
/// Lower bound on the opacity used to normalize rendered depth.
pub const DEPTH_OPACITY_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: Image,
    pub depth: Image,
    pub opacity: Image,
}

/// A Gaussian after projection into one camera.
#[derive(Clone, Debug)]
struct Splat {
    index: usize,
    p_cam: Vec3,
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
    jac: Matrix2x3<f64>,
    cov_cam: Mat3,
    opacity: f64,
    color: Vec3,
}

#[derive(Clone, Copy, Debug)]
struct Contribution {
    splat: u32,
    alpha: f64,
    falloff: f64,
    clamped: bool,
    transmittance: f64,
}

/// Forward-pass intermediates needed by [`backward`].
#[derive(Clone, Debug)]
pub struct RenderCache {
    splats: Vec<Splat>,
    offsets: Vec<usize>,
    entries: Vec<Contribution>,
    final_transmittance: Vec<f64>,
    depth_numerator: Vec<f64>,
}

impl RenderCache {
    /// Number of Gaussians that survived culling.
    pub fn visible(&self) -> usize {
        self.splats.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vec3,
    pub scales: Vec3,
    /// Local axis-angle increment `R ← R·Exp(δ)`.
    pub rotation: Vec3,
    pub color: Vec3,
    pub opacity: f64,
}

fn sort_key(g: &MapGaussian) -> [f64; 14] {
    let q = g.orientation.to_xyzw();
    [
        g.mean.x, g.mean.y, g.mean.z, g.color.x, g.color.y, g.color.z, g.opacity, g.scales.x, g.scales.y,
        g.scales.z, q[0], q[1], q[2], q[3],
    ]
}

/// Front-to-back order by camera depth; ties resolved by parameters so the
/// result does not depend on storage order.
fn depth_order(a: (&Splat, &MapGaussian), b: (&Splat, &MapGaussian)) -> Ordering {
    a.0.p_cam
        .z
        .total_cmp(&b.0.p_cam.z)
        .then_with(|| {
            sort_key(a.1)
                .iter()
                .zip(sort_key(b.1).iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then(a.0.index.cmp(&b.0.index))
}

fn project(index: usize, g: &MapGaussian, cam: &CameraModel) -> Option<Splat> {
    if g.opacity < MIN_PEAK_ALPHA {
        return None;
    }
    let k = &cam.intrinsics;
    let w = cam.pose.rotation.matrix();
    let p = cam.pose.transform_point(&g.mean);
    if !(p.z > NEAR_PLANE) {
        return None;
    }
    let (iz, iz2) = (1.0 / p.z, 1.0 / (p.z * p.z));
    let jac = Matrix2x3::new(k.fx * iz, 0.0, -k.fx * p.x * iz2, 0.0, k.fy * iz, -k.fy * p.y * iz2);
    let cov_cam = w * g.covariance() * w.transpose();
    let cov2d = jac * cov_cam * jac.transpose();
    let cov2d = 0.5 * (cov2d + cov2d.transpose());
    let det = cov2d.determinant();
    if !(det > 1e-24) || !det.is_finite() {
        return None;
    }
    let conic = cov2d.try_inverse()?;
    Some(Splat {
        index,
        p_cam: p,
        mean2d: Vector2::new(k.fx * p.x * iz + k.cx, k.fy * p.y * iz + k.cy),
        conic,
        jac,
        cov_cam,
        opacity: g.opacity,
        color: g.color,
    })
}

/// Pixel range covered by a splat's significant footprint.
fn footprint(s: &Splat, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let cov2d = s.conic.try_inverse()?;
    let tr = cov2d.trace();
    let det = cov2d.determinant();
    let lambda_max = 0.5 * tr + (0.25 * tr * tr - det).max(0.0).sqrt();
    let r = (CUTOFF_Q * lambda_max).sqrt();
    let span = |c: f64, n: usize| -> Option<(usize, usize)> {
        let lo = (c - r).ceil().max(0.0);
        let hi = (c + r).floor().min(n as f64 - 1.0);
        (lo <= hi).then_some((lo as usize, hi as usize))
    };
    let (x0, x1) = span(s.mean2d.x, width)?;
    let (y0, y1) = span(s.mean2d.y, height)?;
    Some((x0, x1, y0, y1))
}

pub fn render(map: &GaussianMap, cam: &CameraModel) -> RenderOutput {
    render_with_cache(map, cam).0
}

pub fn render_with_cache(map: &GaussianMap, cam: &CameraModel) -> (RenderOutput, RenderCache) {
    let (w, h) = (cam.intrinsics.width, cam.intrinsics.height);
    let mut splats: Vec<Splat> = map
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project(i, g, cam))
        .collect();
    splats.sort_by(|a, b| depth_order((a, &map.gaussians[a.index]), (b, &map.gaussians[b.index])));

    // Per-pixel lists in front-to-back order via a stable counting sort.
    let mut raw: Vec<(usize, Contribution)> = Vec::new();
    for (si, s) in splats.iter().enumerate() {
        let Some((x0, x1, y0, y1)) = footprint(s, w, h) else {
            continue;
        };
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = Vector2::new(x as f64 - s.mean2d.x, y as f64 - s.mean2d.y);
                let falloff = (-0.5 * d.dot(&(s.conic * d))).exp();
                let a = s.opacity * falloff;
                if a < ALPHA_EPS {
                    continue;
                }
                let clamped = a > ALPHA_MAX;
                raw.push((
                    y * w + x,
                    Contribution {
                        splat: si as u32,
                        alpha: if clamped { ALPHA_MAX } else { a },
                        falloff,
                        clamped,
                        transmittance: 0.0,
                    },
                ));
            }
        }
    }
    let mut offsets = vec![0usize; w * h + 1];
    for (p, _) in &raw {
        offsets[p + 1] += 1;
    }
    for i in 0..w * h {
        offsets[i + 1] += offsets[i];
    }
    let mut cursor = offsets.clone();
    let mut entries = vec![
        Contribution {
            splat: 0,
            alpha: 0.0,
            falloff: 0.0,
            clamped: false,
            transmittance: 0.0
        };
        raw.len()
    ];
    for (p, c) in raw {
        entries[cursor[p]] = c;
        cursor[p] += 1;
    }

    let mut color = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut opacity = Image::new(w, h, 1);
    let mut final_transmittance = vec![1.0; w * h];
    let mut depth_numerator = vec![0.0; w * h];
    for p in 0..w * h {
        let mut t = 1.0;
        let mut c = Vec3::zeros();
        let mut dn = 0.0;
        for e in &mut entries[offsets[p]..offsets[p + 1]] {
            let s = &splats[e.splat as usize];
            e.transmittance = t;
            let wgt = e.alpha * t;
            c += s.color * wgt;
            dn += s.p_cam.z * wgt;
            t *= 1.0 - e.alpha;
        }
        let o = 1.0 - t;
        color.data[3 * p..3 * p + 3].copy_from_slice(c.as_slice());
        opacity.data[p] = o;
        depth.data[p] = dn / o.max(DEPTH_OPACITY_FLOOR);
        final_transmittance[p] = t;
        depth_numerator[p] = dn;
    }
    (
        RenderOutput { color, depth, opacity },
        RenderCache {
            splats,
            offsets,
            entries,
            final_transmittance,
            depth_numerator,
        },
    )
}

/// Gradients of a scalar loss with respect to every Gaussian, given the
/// loss gradients on the rendered color, depth and (optionally) opacity.
pub fn backward(
    map: &GaussianMap,
    cam: &CameraModel,
    cache: &RenderCache,
    d_color: &Image,
    d_depth: &Image,
    d_opacity: Option<&Image>,
) -> Vec<GaussianGrad> {
    let k = &cam.intrinsics;
    let npix = k.width * k.height;
    let ns = cache.splats.len();
    let mut d_mean2d = vec![Vector2::zeros(); ns];
    let mut d_cov2d = vec![Matrix2::zeros(); ns];
    let mut d_z = vec![0.0; ns];
    let mut d_color_s = vec![Vec3::zeros(); ns];
    let mut d_opacity_s = vec![0.0; ns];

    for p in 0..npix {
        let list = &cache.entries[cache.offsets[p]..cache.offsets[p + 1]];
        if list.is_empty() {
            continue;
        }
        let gc = Vec3::new(d_color.data[3 * p], d_color.data[3 * p + 1], d_color.data[3 * p + 2]);
        let gd = d_depth.data[p];
        let go = d_opacity.map_or(0.0, |o| o.data[p]);
        let o = 1.0 - cache.final_transmittance[p];
        let o_bar = o.max(DEPTH_OPACITY_FLOOR);
        let depth = cache.depth_numerator[p] / o_bar;
        let depth_through_o = if o > DEPTH_OPACITY_FLOOR { depth / o_bar } else { 0.0 };
        let (px, py) = ((p % k.width) as f64, (p / k.width) as f64);

        let mut behind_color = Vec3::zeros();
        let mut behind_depth = 0.0;
        let mut behind_opacity = 0.0;
        for e in list.iter().rev() {
            let si = e.splat as usize;
            let s = &cache.splats[si];
            let (a, t) = (e.alpha, e.transmittance);
            let dc_da = (s.color - behind_color) * t;
            let dn_da = (s.p_cam.z - behind_depth) * t;
            let do_da = (1.0 - behind_opacity) * t;
            let dl_da = gc.dot(&dc_da) + gd * (dn_da / o_bar - depth_through_o * do_da) + go * do_da;

            d_color_s[si] += gc * (a * t);
            d_z[si] += gd * a * t / o_bar;
            if !e.clamped {
                d_opacity_s[si] += dl_da * e.falloff;
                let dl_dq = -0.5 * a * dl_da;
                let delta = Vector2::new(px - s.mean2d.x, py - s.mean2d.y);
                let ad = s.conic * delta;
                d_mean2d[si] += -2.0 * dl_dq * ad;
                d_cov2d[si] -= dl_dq * ad * ad.transpose();
            }

            behind_color = s.color * a + behind_color * (1.0 - a);
            behind_depth = s.p_cam.z * a + behind_depth * (1.0 - a);
            behind_opacity = a + behind_opacity * (1.0 - a);
        }
    }

    let w = cam.pose.rotation.matrix();
    let mut grads = vec![GaussianGrad::default(); map.len()];
    for (si, s) in cache.splats.iter().enumerate() {
        let g = &map.gaussians[s.index];
        let (x, y, z) = (s.p_cam.x, s.p_cam.y, s.p_cam.z);
        let (iz, iz2, iz3) = (1.0 / z, 1.0 / (z * z), 1.0 / (z * z * z));
        let gcov = d_cov2d[si];
        let d_cov_cam = s.jac.transpose() * gcov * s.jac;
        let d_jac = 2.0 * gcov * s.jac * s.cov_cam;
        let gm = d_mean2d[si];

        let mut d_p = Vec3::new(
            gm.x * k.fx * iz - d_jac[(0, 2)] * k.fx * iz2,
            gm.y * k.fy * iz - d_jac[(1, 2)] * k.fy * iz2,
            -gm.x * k.fx * x * iz2 - gm.y * k.fy * y * iz2,
        );
        d_p.z += -d_jac[(0, 0)] * k.fx * iz2 + d_jac[(0, 2)] * 2.0 * k.fx * x * iz3 - d_jac[(1, 1)] * k.fy * iz2
            + d_jac[(1, 2)] * 2.0 * k.fy * y * iz3;
        d_p.z += d_z[si];

        let d_sigma = w.transpose() * d_cov_cam * w;
        let r = g.orientation.matrix();
        let local = r.transpose() * d_sigma * r;
        let s2 = Mat3::from_diagonal(&g.scales.component_mul(&g.scales));
        let d_r = 2.0 * d_sigma * r * s2;
        let mut d_rot = Vec3::zeros();
        for axis in 0..3 {
            let gen = r * skew(&Vec3::ith(axis, 1.0));
            d_rot[axis] = d_r.component_mul(&gen).sum();
        }

        let out = &mut grads[s.index];
        out.mean = w.transpose() * d_p;
        out.scales = Vec3::new(
            2.0 * g.scales.x * local[(0, 0)],
            2.0 * g.scales.y * local[(1, 1)],
            2.0 * g.scales.z * local[(2, 2)],
        );
        out.rotation = d_rot;
        out.color = d_color_s[si];
        out.opacity = d_opacity_s[si];
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::CameraIntrinsics;
    use crate::se3::{Pose, Rotation};
    use approx::assert_relative_eq;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(w: usize, h: usize) -> CameraModel {
        CameraModel::new(
            CameraIntrinsics {
                fx: 10.0,
                fy: 10.0,
                cx: (w as f64 - 1.0) / 2.0,
                cy: (h as f64 - 1.0) / 2.0,
                width: w,
                height: h,
            },
            Pose::identity(),
        )
    }

    #[test]
    fn empty_map_renders_black() {
        let out = render(&GaussianMap::new(), &cam(8, 8));
        assert!(out.color.data.iter().all(|v| *v == 0.0));
        assert!(out.opacity.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn opaque_gaussian_on_pixel() {
        let c = cam(9, 9);
        let map = GaussianMap::from_gaussians(vec![MapGaussian::isotropic(
            Vec3::new(0.0, 0.0, 2.0),
            0.05,
            Vec3::new(0.3, 0.6, 0.9),
            1.0,
        )]);
        let out = render(&map, &c);
        for ch in 0..3 {
            assert_relative_eq!(out.color.get(4, 4, ch), [0.3, 0.6, 0.9][ch], epsilon = 1e-6);
        }
        assert!(out.opacity.get(4, 4, 0) >= 0.999);
        assert_relative_eq!(out.depth.get(4, 4, 0), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn two_layer_composite() {
        let c = cam(9, 9);
        let map = GaussianMap::from_gaussians(vec![
            MapGaussian::isotropic(Vec3::new(0.0, 0.0, 3.0), 0.05, Vec3::new(0.0, 1.0, 0.0), 1.0),
            MapGaussian::isotropic(Vec3::new(0.0, 0.0, 1.0), 0.05, Vec3::new(1.0, 0.0, 0.0), 0.6),
        ]);
        let out = render(&map, &c);
        assert_relative_eq!(out.color.get(4, 4, 0), 0.6, epsilon = 1e-6);
        assert_relative_eq!(out.color.get(4, 4, 1), 0.4, epsilon = 1e-6);
        assert_relative_eq!(out.color.get(4, 4, 2), 0.0, epsilon = 1e-6);
    }

    fn random_map(rng: &mut ChaCha8Rng, n: usize) -> GaussianMap {
        GaussianMap::from_gaussians(
            (0..n)
                .map(|_| {
                    MapGaussian::new(
                        Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(1.0..3.0)),
                        Rotation::exp(&Vec3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        )),
                        Vec3::new(rng.random_range(0.05..0.3), rng.random_range(0.05..0.3), rng.random_range(0.01..0.3)),
                        Vec3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
                        rng.random_range(0.05..1.0),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn storage_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = cam(12, 10);
        for _ in 0..10 {
            let map = random_map(&mut rng, 8);
            let mut shuffled = map.clone();
            shuffled.gaussians.shuffle(&mut rng);
            assert_eq!(render(&map, &c), render(&shuffled, &c));
        }
    }

    #[test]
    fn zero_opacity_gaussian_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = cam(10, 10);
        let map = random_map(&mut rng, 6);
        let mut with_ghost = map.clone();
        let mut ghost = with_ghost.gaussians[2].clone();
        ghost.opacity = 0.0;
        ghost.mean.z -= 0.5;
        with_ghost.gaussians.insert(1, ghost);
        let (a, b) = (render(&map, &c), render(&with_ghost, &c));
        for (x, y) in a.color.data.iter().zip(&b.color.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn behind_camera_is_culled() {
        let map = GaussianMap::from_gaussians(vec![MapGaussian::isotropic(
            Vec3::new(0.0, 0.0, -1.0),
            0.5,
            Vec3::repeat(1.0),
            1.0,
        )]);
        let (out, cache) = render_with_cache(&map, &cam(8, 8));
        assert_eq!(cache.visible(), 0);
        assert!(out.opacity.data.iter().all(|v| *v == 0.0));
    }
}
