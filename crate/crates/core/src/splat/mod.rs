//! 3D Gaussian map: primitives, seeding from tracked clouds, keyframe gating,
//! scale normalization and the text map format.

mod loss;
mod optimize;
mod render;

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::SymmetricEigen;

pub use loss::{mapping_loss, mapping_loss_with_grad, LossBreakdown, LossGrad};
pub use optimize::{optimize_map, verify_gradients, GradientCheck, MappingKeyframe};
pub use render::{ALPHA_MAX, MIN_PEAK_ALPHA, NEAR_PLANE, backward, render, render_with_cache, GaussianGrad, RenderCache, RenderOutput};

use crate::error::{Error, Result};
use crate::gicp::GaussianCloud;
use crate::kdtree::KdTree;
use crate::raster::CameraIntrinsics;
use crate::se3::{Mat3, Pose, Rotation, Vec3};

pub const MIN_SCALE: f64 = 1e-4;
pub const MAX_SCALE: f64 = 5.0;
/// Seeding skips points closer than this to an existing Gaussian.
pub const DEDUP_RADIUS: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct MapGaussian {
    pub mean: Vec3,
    /// Column `i` of the rotation is the axis of `scales[i]`.
    pub orientation: Rotation,
    /// Standard deviations in meters, stored in descending order at seeding.
    pub scales: Vec3,
    pub color: Vec3,
    pub opacity: f64,
    /// Seeding batch that created this Gaussian.
    pub birth: u64,
}

impl MapGaussian {
    pub fn new(mean: Vec3, orientation: Rotation, scales: Vec3, color: Vec3, opacity: f64) -> Self {
        Self {
            mean,
            orientation,
            scales,
            color,
            opacity,
            birth: 0,
        }
    }

    pub fn isotropic(mean: Vec3, scale: f64, color: Vec3, opacity: f64) -> Self {
        Self::new(mean, Rotation::identity(), Vec3::repeat(scale), color, opacity)
    }

    /// `R diag(s²) Rᵀ`.
    pub fn covariance(&self) -> Mat3 {
        let r = self.orientation.matrix();
        let out = r * Mat3::from_diagonal(&self.scales.component_mul(&self.scales)) * r.transpose();
        0.5 * (out + out.transpose())
    }

    /// Project parameters back into their admissible boxes.
    pub fn clamp_to_bounds(&mut self) {
        self.scales = self.scales.map(|s| s.clamp(MIN_SCALE, MAX_SCALE));
        self.color = self.color.map(|c| c.clamp(0.0, 1.0));
        self.opacity = self.opacity.clamp(0.0, 1.0);
    }

    pub fn within_bounds(&self) -> bool {
        self.scales.iter().all(|s| (MIN_SCALE..=MAX_SCALE).contains(s))
            && self.color.iter().all(|c| (0.0..=1.0).contains(c))
            && (0.0..=1.0).contains(&self.opacity)
            && self.mean.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianMap {
    pub gaussians: Vec<MapGaussian>,
    generation: u64,
    batches: u64,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_gaussians(gaussians: Vec<MapGaussian>) -> Self {
        Self {
            gaussians,
            generation: 0,
            batches: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Bumped on every insertion or removal.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn bump_generation(&mut self) {
        self.generation += 1;
    }

    /// Remove Gaussians with opacity below `threshold`; returns the count.
    pub fn prune(&mut self, threshold: f64) -> usize {
        let before = self.gaussians.len();
        self.gaussians.retain(|g| g.opacity >= threshold);
        let removed = before - self.gaussians.len();
        if removed > 0 {
            self.generation += 1;
        }
        removed
    }

    pub fn save(&self, path: &Path, intrinsics: Option<&CameraIntrinsics>) -> Result<()> {
        std::fs::write(path, self.to_text(intrinsics))?;
        Ok(())
    }

    /// Text format: optional `camera fx fy cx cy width height` line, then one
    /// Gaussian per line `mx my mz qx qy qz qw s0 s1 s2 r g b opacity`.
    pub fn to_text(&self, intrinsics: Option<&CameraIntrinsics>) -> String {
        let mut out = String::from("# vigs gaussian map\n");
        if let Some(k) = intrinsics {
            writeln!(out, "camera {} {} {} {} {} {}", k.fx, k.fy, k.cx, k.cy, k.width, k.height).unwrap();
        }
        for g in &self.gaussians {
            let q = g.orientation.to_xyzw();
            writeln!(
                out,
                "{} {} {} {} {} {} {} {} {} {} {} {} {} {}",
                g.mean.x, g.mean.y, g.mean.z, q[0], q[1], q[2], q[3], g.scales.x, g.scales.y, g.scales.z,
                g.color.x, g.color.y, g.color.z, g.opacity
            )
            .unwrap();
        }
        out
    }

    pub fn load(path: &Path) -> Result<(Self, Option<CameraIntrinsics>)> {
        if !path.exists() {
            return Err(Error::MissingAsset(vec![path.to_path_buf()]));
        }
        Self::parse(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<(Self, Option<CameraIntrinsics>)> {
        let mut gaussians = Vec::new();
        let mut camera = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            let loc = || format!("{source}:{}", n + 1);
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (is_camera, body) = match line.strip_prefix("camera") {
                Some(rest) => (true, rest),
                None => (false, line),
            };
            let v: Vec<f64> = body
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(loc(), format!("{e}")))?;
            if is_camera {
                if v.len() != 6 {
                    return Err(Error::parse(loc(), "camera line needs fx fy cx cy width height"));
                }
                let k = CameraIntrinsics {
                    fx: v[0],
                    fy: v[1],
                    cx: v[2],
                    cy: v[3],
                    width: v[4] as usize,
                    height: v[5] as usize,
                };
                k.validate().map_err(|e| Error::parse(loc(), e.to_string()))?;
                camera = Some(k);
                continue;
            }
            if v.len() != 14 {
                return Err(Error::parse(loc(), format!("expected 14 values, got {}", v.len())));
            }
            let orientation =
                Rotation::from_xyzw([v[3], v[4], v[5], v[6]]).map_err(|e| Error::parse(loc(), e.to_string()))?;
            let g = MapGaussian::new(
                Vec3::new(v[0], v[1], v[2]),
                orientation,
                Vec3::new(v[7], v[8], v[9]),
                Vec3::new(v[10], v[11], v[12]),
                v[13],
            );
            if !g.within_bounds() {
                return Err(Error::parse(loc(), "Gaussian parameters out of range"));
            }
            gaussians.push(g);
        }
        Ok((Self::from_gaussians(gaussians), camera))
    }
}

/// Pinhole camera with a camera-from-world pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

impl CameraModel {
    pub fn new(intrinsics: CameraIntrinsics, pose: Pose) -> Self {
        Self { intrinsics, pose }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MappingConfig {
    pub lambda_i: f64,
    pub lambda_d: f64,
    pub iterations_per_keyframe: usize,
    /// Only the most recent keyframes take part in optimization (0 = all).
    pub window: usize,
    pub lr_mean: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub opacity_init: f64,
    pub prune_opacity: f64,
    pub keyframe_translation: f64,
    /// Radians.
    pub keyframe_rotation: f64,
    pub seed: u64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            lambda_i: 0.2,
            lambda_d: 0.5,
            iterations_per_keyframe: 30,
            window: 8,
            lr_mean: 1e-4,
            lr_color: 2.5e-3,
            lr_opacity: 5e-2,
            lr_scale: 1e-3,
            lr_rotation: 1e-3,
            opacity_init: 0.7,
            prune_opacity: 0.05,
            keyframe_translation: 0.3,
            keyframe_rotation: 15f64.to_radians(),
            seed: 0,
        }
    }
}

impl MappingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_i) || !(self.lambda_d >= 0.0) {
            return Err(Error::invalid("mapping.lambda_i must be in [0, 1] and mapping.lambda_d >= 0"));
        }
        if self.iterations_per_keyframe < 1 {
            return Err(Error::invalid("mapping.iterations_per_keyframe must be at least 1"));
        }
        let rates = [self.lr_mean, self.lr_color, self.lr_opacity, self.lr_scale, self.lr_rotation];
        if rates.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::invalid("mapping step sizes must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.opacity_init) || !(0.0..=1.0).contains(&self.prune_opacity) {
            return Err(Error::invalid("mapping opacities must be in [0, 1]"));
        }
        if !(self.keyframe_translation > 0.0 && self.keyframe_rotation > 0.0) {
            return Err(Error::invalid("keyframe thresholds must be positive"));
        }
        Ok(())
    }
}

/// Insert one Gaussian per cloud point not already covered by the map.
/// `cam_pose` is camera-from-world. Returns the number inserted.
pub fn seed_from_cloud(map: &mut GaussianMap, cloud: &GaussianCloud, cam_pose: &Pose, cfg: &MappingConfig) -> Result<usize> {
    if cloud.is_empty() {
        return Ok(0);
    }
    let colors = cloud.cloud.colors.as_ref().ok_or(Error::MissingColor)?;
    let world_from_cam = cam_pose.inverse();
    let r_wc = world_from_cam.rotation.matrix();
    let existing = KdTree::new(map.gaussians.iter().map(|g| g.mean).collect());
    let local = KdTree::new(cloud.cloud.points.clone());
    let batch = map.batches + 1;

    let mut inserted = 0;
    for (i, p) in cloud.cloud.points.iter().enumerate() {
        let mean = world_from_cam.transform_point(p);
        if existing.nearest(&mean, DEDUP_RADIUS).is_some_and(|n| n.dist_sq < DEDUP_RADIUS * DEDUP_RADIUS) {
            continue;
        }
        let spacing = local
            .knn(p, 4)
            .iter()
            .find(|n| n.index != i && n.dist_sq > 0.0)
            .map_or(DEDUP_RADIUS, |n| n.dist_sq.sqrt());
        let cov = cloud.covariances.get(i).copied().unwrap_or_else(Mat3::identity);
        let (axes, spectrum) = descending_eigen(&(r_wc * cov * r_wc.transpose()));
        let scales = spectrum.map(|l| (l.max(0.0).sqrt() * spacing).clamp(MIN_SCALE, MAX_SCALE));
        let orientation = Rotation::from_matrix(&axes)?;
        let mut g = MapGaussian::new(mean, orientation, scales, colors[i], cfg.opacity_init);
        g.clamp_to_bounds();
        g.birth = batch;
        map.gaussians.push(g);
        inserted += 1;
    }
    if inserted > 0 {
        map.batches = batch;
        map.generation += 1;
    }
    Ok(inserted)
}

/// Eigenvectors as rotation columns ordered by descending eigenvalue, with a
/// right-handed frame.
fn descending_eigen(m: &Mat3) -> (Mat3, Vec3) {
    let eig = SymmetricEigen::new(*m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut axes = Mat3::zeros();
    let mut values = Vec3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        axes.set_column(dst, &eig.eigenvectors.column(src).normalize());
        values[dst] = eig.eigenvalues[src];
    }
    if axes.determinant() < 0.0 {
        let flipped = -axes.column(2);
        axes.set_column(2, &flipped);
    }
    (axes, values)
}

/// True when `current` moved far enough from the last keyframe; the first
/// frame (`None`) is always a keyframe. Poses are camera-from-world.
pub fn select_keyframe(current: &Pose, last_keyframe: Option<&Pose>, cfg: &MappingConfig) -> bool {
    let Some(last) = last_keyframe else {
        return true;
    };
    let rel = last.compose(&current.inverse());
    let translation = (current.inverse().translation - last.inverse().translation).norm();
    translation > cfg.keyframe_translation || rel.rotation.angle() > cfg.keyframe_rotation
}

/// Clamp every scale into `[MIN_SCALE, 3 × median nearest-neighbour distance
/// of the latest seeding batch]`. Returns how many Gaussians changed.
pub fn scale_normalization(map: &mut GaussianMap) -> usize {
    if map.is_empty() {
        return 0;
    }
    let newest = map.gaussians.iter().map(|g| g.birth).max().unwrap_or(0);
    let mut recent: Vec<Vec3> = map.gaussians.iter().filter(|g| g.birth == newest).map(|g| g.mean).collect();
    if recent.len() < 2 {
        recent = map.gaussians.iter().map(|g| g.mean).collect();
    }
    let upper = median_nn_distance(&recent).map_or(MAX_SCALE, |d| (3.0 * d).clamp(MIN_SCALE, MAX_SCALE));
    let mut adjusted = 0;
    for g in &mut map.gaussians {
        let clamped = g.scales.map(|s| s.clamp(MIN_SCALE, upper));
        if clamped != g.scales {
            g.scales = clamped;
            adjusted += 1;
        }
    }
    adjusted
}

fn median_nn_distance(points: &[Vec3]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let tree = KdTree::new(points.to_vec());
    let mut d: Vec<f64> = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| tree.knn(p, 2).into_iter().find(|n| n.index != i).map(|n| n.dist_sq.sqrt()))
        .filter(|d| *d > 0.0)
        .collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    Some(if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) })
}

/// Save a rendered color image as 8-bit PNG and its depth as 16-bit
/// millimeters.
pub fn export_render(out: &RenderOutput, color_path: &Path, depth_path: Option<&Path>) -> Result<()> {
    crate::raster::save_rgb_png(color_path, &out.color)?;
    if let Some(p) = depth_path {
        crate::raster::save_depth_png(p, &out.depth, 0.001)?;
    }
    Ok(())
}
