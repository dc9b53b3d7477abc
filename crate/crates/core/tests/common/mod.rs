#![allow(dead_code)]

use std::path::{Path, PathBuf};

use nalgebra::Matrix2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vigs_core::gicp::{estimate_covariances, GaussianCloud, PointCloud, TrackerConfig};
use vigs_core::raster::{CameraIntrinsics, Image};
use vigs_core::se3::{Pose, Rotation, Vec3};
use vigs_core::splat::{ALPHA_MAX, MIN_PEAK_ALPHA, NEAR_PLANE};
use vigs_core::splat::{CameraModel, GaussianMap, MapGaussian};
use vigs_core::synth::{synthesize_sequence, SyntheticSceneSpec};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// Generate a committed fixture spec into `dir`.
pub fn synthesize_fixture(name: &str, dir: &Path) -> vigs_core::dataset::SequenceManifest {
    let spec = SyntheticSceneSpec::load(&fixture(name)).expect("fixture spec parses");
    synthesize_sequence(&spec, dir).expect("fixture synthesizes")
}

pub fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Rotation {
    let axis = random_unit(rng);
    Rotation::exp(&(axis * rng.random_range(0.0..=max_angle)))
}

pub fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn sample_box_surface(rng: &mut ChaCha8Rng, min: Vec3, max: Vec3) -> Vec3 {
    let size = max - min;
    let areas = [size.y * size.z, size.x * size.z, size.x * size.y];
    let total: f64 = areas.iter().sum::<f64>() * 2.0;
    let mut pick = rng.random_range(0.0..total);
    for (axis, a) in areas.iter().enumerate() {
        for side in [0.0, 1.0] {
            if pick < *a {
                let mut p = Vec3::new(
                    rng.random_range(min.x..max.x),
                    rng.random_range(min.y..max.y),
                    rng.random_range(min.z..max.z),
                );
                p[axis] = min[axis] + side * size[axis];
                return p;
            }
            pick -= a;
        }
    }
    max
}

/// Points on the faces of a few random boxes around the origin; enough
/// structure to constrain all six degrees of freedom.
pub fn clutter_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    let boxes: Vec<(Vec3, Vec3)> = (0..5)
        .map(|_| {
            let c = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
            let h = Vec3::new(rng.random_range(0.15..0.5), rng.random_range(0.15..0.5), rng.random_range(0.15..0.5));
            (c - h, c + h)
        })
        .collect();
    (0..n)
        .map(|i| {
            let (lo, hi) = boxes[i % boxes.len()];
            sample_box_surface(rng, lo, hi)
        })
        .collect()
}

/// The same sampled cube surface copied to every cell of a `cells³` lattice
/// with spacing `period`: a perfectly repetitive scene.
pub fn lattice_cloud(rng: &mut ChaCha8Rng, n: usize, period: f64, cells: usize) -> Vec<Vec3> {
    let count = cells * cells * cells;
    let half = 0.2 * period;
    let pattern: Vec<Vec3> = (0..n.div_ceil(count))
        .map(|_| sample_box_surface(rng, Vec3::repeat(-half), Vec3::repeat(half)))
        .collect();
    (0..n)
        .map(|i| {
            let cell = i % count;
            let c = Vec3::new(
                (cell % cells) as f64,
                ((cell / cells) % cells) as f64,
                (cell / (cells * cells)) as f64,
            ) * period;
            c + pattern[i / count]
        })
        .collect()
}

/// A registration pair: `target` and the same geometry seen from `truth⁻¹`,
/// so `target ≈ truth · source`.
pub fn registration_pair(points: &[Vec3], truth: &Pose, cfg: &TrackerConfig) -> (GaussianCloud, GaussianCloud) {
    let target = PointCloud::new(points.to_vec());
    let source = target.transformed(&truth.inverse());
    (
        estimate_covariances(&source, cfg.knn_k, cfg.cov_floor).expect("enough points"),
        estimate_covariances(&target, cfg.knn_k, cfg.cov_floor).expect("enough points"),
    )
}

pub fn small_camera(w: usize, h: usize, f: f64) -> CameraModel {
    CameraModel::new(
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
            width: w,
            height: h,
        },
        Pose::identity(),
    )
}

pub fn random_gaussian(rng: &mut ChaCha8Rng) -> MapGaussian {
    MapGaussian::new(
        Vec3::new(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(0.8..3.0)),
        random_rotation(rng, 3.0),
        Vec3::new(rng.random_range(0.03..0.4), rng.random_range(0.03..0.4), rng.random_range(0.01..0.4)),
        Vec3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
        rng.random_range(0.0..1.0),
    )
}

pub fn random_scene(rng: &mut ChaCha8Rng, max: usize) -> GaussianMap {
    let n = rng.random_range(1..=max);
    GaussianMap::from_gaussians((0..n).map(|_| random_gaussian(rng)).collect())
}

/// Color and opacity straight from the splatting equations: for every pixel,
/// sort by camera depth, evaluate each projected 2D Gaussian and composite
/// front to back.
pub fn direct_render(map: &GaussianMap, cam: &CameraModel) -> (Image, Image) {
    let k = &cam.intrinsics;
    let w = cam.pose.rotation.matrix();
    struct Projected {
        z: f64,
        u: f64,
        v: f64,
        inv: Matrix2<f64>,
        opacity: f64,
        color: Vec3,
    }
    let mut layers: Vec<Projected> = map
        .gaussians
        .iter()
        .filter(|g| g.opacity >= MIN_PEAK_ALPHA)
        .filter_map(|g| {
            let p = cam.pose.transform_point(&g.mean);
            if p.z <= NEAR_PLANE {
                return None;
            }
            let jac = nalgebra::Matrix2x3::new(
                k.fx / p.z,
                0.0,
                -k.fx * p.x / (p.z * p.z),
                0.0,
                k.fy / p.z,
                -k.fy * p.y / (p.z * p.z),
            );
            let r = g.orientation.matrix();
            let s = nalgebra::Matrix3::from_diagonal(&g.scales.component_mul(&g.scales));
            let cov = jac * w * (r * s * r.transpose()) * w.transpose() * jac.transpose();
            Some(Projected {
                z: p.z,
                u: k.fx * p.x / p.z + k.cx,
                v: k.fy * p.y / p.z + k.cy,
                inv: cov.try_inverse()?,
                opacity: g.opacity,
                color: g.color,
            })
        })
        .collect();
    layers.sort_by(|a, b| a.z.total_cmp(&b.z));
    let mut color = Image::new(k.width, k.height, 3);
    let mut opacity = Image::new(k.width, k.height, 1);
    for y in 0..k.height {
        for x in 0..k.width {
            let mut c = Vec3::zeros();
            let mut t = 1.0;
            for l in &layers {
                let d = nalgebra::Vector2::new(x as f64 - l.u, y as f64 - l.v);
                let alpha = (l.opacity * (-0.5 * d.dot(&(l.inv * d))).exp()).min(ALPHA_MAX);
                c += l.color * alpha * t;
                t *= 1.0 - alpha;
            }
            for ch in 0..3 {
                color.set(x, y, ch, c[ch]);
            }
            opacity.set(x, y, 0, 1.0 - t);
        }
    }
    (color, opacity)
}
