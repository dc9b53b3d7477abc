//! Generalized-ICP tracking of RGB-D point clouds.
//!
//! Every point carries a plane-regularized covariance (spectrum `(1, 1, ε)`)
//! estimated from its k nearest neighbours. Registration minimizes the
//! Mahalanobis distance `Σ dᵀ(Σ_tgt + R Σ_src Rᵀ)⁻¹ d` with `d = x_tgt − T x_src`
//! by damped Gauss-Newton, re-associating nearest neighbours each iteration.
//!
//! The estimated transform maps source (frame) coordinates into target (map)
//! coordinates, i.e. it is a world-from-camera pose.

use std::collections::HashMap;

use nalgebra::{Matrix6, SymmetricEigen, Vector6};

use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::raster::{CameraIntrinsics, Image};
use crate::se3::{rotate_covariance, skew, Mat3, Pose, Vec3};

/// Depths beyond this are treated as invalid.
pub const MAX_DEPTH: f64 = 20.0;
/// Minimum correspondences for a well-posed 6-DoF update.
const MIN_CORRESPONDENCES: usize = 6;
const MAX_DAMPING_TRIES: usize = 12;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// RGB in `[0, 1]`, parallel to `points` when present.
    pub colors: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self { points, colors: None }
    }

    pub fn with_colors(points: Vec<Vec3>, colors: Vec<Vec3>) -> Self {
        debug_assert_eq!(points.len(), colors.len());
        Self {
            points,
            colors: Some(colors),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            colors: self.colors.clone(),
        }
    }
}

/// Points with per-point covariances.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub cloud: PointCloud,
    pub covariances: Vec<Mat3>,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    /// Rigidly move points and rotate covariances.
    pub fn transformed(&self, pose: &Pose) -> GaussianCloud {
        let r = pose.rotation.matrix();
        GaussianCloud {
            cloud: self.cloud.transformed(pose),
            covariances: self.covariances.iter().map(|c| rotate_covariance(&r, c)).collect(),
        }
    }
}

/// A Gaussian cloud with a kd-tree over its points.
#[derive(Clone, Debug)]
pub struct IndexedCloud {
    cloud: GaussianCloud,
    tree: KdTree,
}

impl IndexedCloud {
    pub fn new(cloud: GaussianCloud) -> Self {
        let tree = KdTree::new(cloud.cloud.points.clone());
        Self { cloud, tree }
    }

    pub fn cloud(&self) -> &GaussianCloud {
        &self.cloud
    }

    pub fn tree(&self) -> &KdTree {
        &self.tree
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

/// Which cloud frames are registered against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReferencePolicy {
    /// Every keyframe accumulated, voxel-downsampled.
    #[default]
    Map,
    /// Only the most recent keyframe.
    LastKeyframe,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    pub knn_k: usize,
    pub max_iterations: usize,
    pub translation_eps: f64,
    pub rotation_eps: f64,
    pub max_correspondence_dist: f64,
    pub voxel_downsample: f64,
    pub cov_floor: f64,
    pub stride: usize,
    pub reference: ReferencePolicy,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            knn_k: 10,
            max_iterations: 30,
            translation_eps: 1e-5,
            rotation_eps: 1e-5,
            max_correspondence_dist: 0.5,
            voxel_downsample: 0.05,
            cov_floor: 1e-3,
            stride: 2,
            reference: ReferencePolicy::Map,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.knn_k < 4 {
            return Err(Error::invalid("tracker.knn_k must be at least 4"));
        }
        if self.max_iterations < 1 || self.stride < 1 {
            return Err(Error::invalid("tracker.max_iterations and tracker.stride must be at least 1"));
        }
        let positive = [
            self.translation_eps,
            self.rotation_eps,
            self.max_correspondence_dist,
            self.voxel_downsample,
            self.cov_floor,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("tracker thresholds must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingResult {
    /// Transform taking frame points onto the reference (world-from-camera).
    pub pose: Pose,
    pub final_cost: f64,
    pub iterations: usize,
    pub inlier_count: usize,
    pub converged: bool,
    /// Objective before and after each accepted step, both evaluated on that
    /// iteration's correspondence set.
    pub cost_trace: Vec<(f64, f64)>,
}

impl TrackingResult {
    fn fixed(pose: Pose, converged: bool) -> Self {
        Self {
            pose,
            final_cost: 0.0,
            iterations: 0,
            inlier_count: 0,
            converged,
            cost_trace: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub src_idx: usize,
    pub tgt_idx: usize,
    /// `(Σ_tgt + R Σ_src Rᵀ)⁻¹` at the pose the match was made.
    pub mahalanobis_info: Mat3,
}

/// Lift every valid depth pixel on a `stride` grid into the camera frame.
pub fn backproject(
    depth: &Image,
    intrinsics: &CameraIntrinsics,
    rgb: Option<&Image>,
    stride: usize,
) -> Result<PointCloud> {
    intrinsics.validate()?;
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    if depth.channels != 1 || depth.width != intrinsics.width || depth.height != intrinsics.height {
        return Err(Error::invalid("depth image does not match intrinsics"));
    }
    if let Some(rgb) = rgb {
        if rgb.channels != 3 || rgb.width != depth.width || rgb.height != depth.height {
            return Err(Error::invalid("color image does not match depth image"));
        }
    }
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for v in (0..depth.height).step_by(stride) {
        for u in (0..depth.width).step_by(stride) {
            let d = depth.get(u, v, 0);
            if !(d > 0.0 && d <= MAX_DEPTH) {
                continue;
            }
            points.push(Vec3::new(
                (u as f64 - intrinsics.cx) / intrinsics.fx * d,
                (v as f64 - intrinsics.cy) / intrinsics.fy * d,
                d,
            ));
            if let Some(rgb) = rgb {
                colors.push(Vec3::new(rgb.get(u, v, 0), rgb.get(u, v, 1), rgb.get(u, v, 2)));
            }
        }
    }
    Ok(PointCloud {
        points,
        colors: rgb.map(|_| colors),
    })
}

fn voxel_key(p: &Vec3, voxel: f64) -> (i64, i64, i64) {
    (
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    )
}

/// Keep the first point falling in each voxel, in input order.
pub fn voxel_downsample(cloud: &PointCloud, voxel: f64) -> PointCloud {
    let keep = voxel_keep_mask(&cloud.points, voxel, &mut HashMap::new());
    let pick = |v: &Vec<Vec3>| v.iter().zip(&keep).filter(|(_, k)| **k).map(|(p, _)| *p).collect();
    PointCloud {
        points: pick(&cloud.points),
        colors: cloud.colors.as_ref().map(pick),
    }
}

fn voxel_keep_mask(points: &[Vec3], voxel: f64, occupied: &mut HashMap<(i64, i64, i64), ()>) -> Vec<bool> {
    points
        .iter()
        .map(|p| occupied.insert(voxel_key(p, voxel), ()).is_none())
        .collect()
}

/// Covariance of each point's `k` nearest neighbours (itself and exact
/// duplicates excluded), with its spectrum replaced by `(1, 1, eps_floor)`.
pub fn estimate_covariances(cloud: &PointCloud, k: usize, eps_floor: f64) -> Result<GaussianCloud> {
    if cloud.len() < k + 1 {
        return Err(Error::InsufficientPoints {
            needed: k + 1,
            got: cloud.len(),
        });
    }
    let tree = KdTree::new(cloud.points.clone());
    let covariances = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let neighbors: Vec<Vec3> = tree
                .knn(p, 2 * k + 1)
                .into_iter()
                .filter(|n| n.index != i && n.dist_sq > 0.0)
                .take(k)
                .map(|n| cloud.points[n.index])
                .collect();
            regularized_covariance(&neighbors, eps_floor)
        })
        .collect();
    Ok(GaussianCloud {
        cloud: cloud.clone(),
        covariances,
    })
}

/// Sample covariance of `pts` with eigenvalues remapped to `(1, 1, eps)`;
/// the eigenvector of the smallest eigenvalue keeps `eps`.
pub fn regularized_covariance(pts: &[Vec3], eps: f64) -> Mat3 {
    if pts.len() < 3 {
        return Mat3::from_diagonal(&Vec3::new(1.0, 1.0, eps));
    }
    let mean = pts.iter().sum::<Vec3>() / pts.len() as f64;
    let cov = pts.iter().fold(Mat3::zeros(), |acc, p| {
        let d = p - mean;
        acc + d * d.transpose()
    }) / pts.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let smallest = eig.eigenvalues.imin();
    let mut spectrum = Vec3::repeat(1.0);
    spectrum[smallest] = eps;
    let v = eig.eigenvectors;
    let out = v * Mat3::from_diagonal(&spectrum) * v.transpose();
    0.5 * (out + out.transpose())
}

fn fused_information(tgt_cov: &Mat3, src_cov: &Mat3, r: &Mat3) -> Option<Mat3> {
    (tgt_cov + rotate_covariance(r, src_cov)).try_inverse()
}

/// Nearest target point within `max_dist` for every source point moved by
/// `guess`, in source order.
pub fn find_correspondences(
    src: &GaussianCloud,
    tgt: &IndexedCloud,
    guess: &Pose,
    max_dist: f64,
) -> Result<Vec<Correspondence>> {
    if tgt.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let r = guess.rotation.matrix();
    let tgt_cov = &tgt.cloud.covariances;
    Ok(src
        .cloud
        .points
        .iter()
        .zip(&src.covariances)
        .enumerate()
        .filter_map(|(i, (p, cov))| {
            let q = guess.transform_point(p);
            let hit = tgt.tree.nearest(&q, max_dist)?;
            let info = fused_information(&tgt_cov[hit.index], cov, &r)?;
            Some(Correspondence {
                src_idx: i,
                tgt_idx: hit.index,
                mahalanobis_info: info,
            })
        })
        .collect())
}

/// GICP objective for fixed correspondences at `pose`.
pub fn registration_cost(src: &GaussianCloud, tgt: &GaussianCloud, pose: &Pose, corr: &[Correspondence]) -> f64 {
    let r = pose.rotation.matrix();
    corr.iter()
        .map(|c| {
            let d = tgt.cloud.points[c.tgt_idx] - pose.transform_point(&src.cloud.points[c.src_idx]);
            match fused_information(&tgt.covariances[c.tgt_idx], &src.covariances[c.src_idx], &r) {
                Some(info) => d.dot(&(info * d)),
                None => f64::INFINITY,
            }
        })
        .sum()
}

fn linearize(src: &GaussianCloud, tgt: &GaussianCloud, pose: &Pose, corr: &[Correspondence]) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut b = Vector6::zeros();
    for c in corr {
        let q = pose.transform_point(&src.cloud.points[c.src_idx]);
        let d = tgt.cloud.points[c.tgt_idx] - q;
        // d(δ) ≈ d − ρ + ⌊q⌋× φ under x ↦ Exp(δ) T x.
        let mut j = nalgebra::Matrix3x6::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-Mat3::identity()));
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&q));
        let jt_info = j.transpose() * c.mahalanobis_info;
        h += jt_info * j;
        b += jt_info * d;
    }
    (h, b)
}

/// Damped Gauss-Newton GICP from `guess`.
pub fn optimize_pose(src: &GaussianCloud, tgt: &IndexedCloud, guess: &Pose, cfg: &TrackerConfig) -> Result<TrackingResult> {
    if src.is_empty() {
        return Err(Error::EmptyFrame);
    }
    if tgt.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let mut pose = *guess;
    let mut lambda = 1e-6;
    let mut result = TrackingResult::fixed(pose, false);

    for iter in 1..=cfg.max_iterations {
        let corr = find_correspondences(src, tgt, &pose, cfg.max_correspondence_dist)?;
        if corr.len() < MIN_CORRESPONDENCES {
            return Err(Error::DegenerateGeometry(corr.len()));
        }
        let cost = registration_cost(src, &tgt.cloud, &pose, &corr);
        let (h, b) = linearize(src, &tgt.cloud, &pose, &corr);
        result.iterations = iter;
        result.inlier_count = corr.len();
        result.final_cost = cost;

        let mut accepted = None;
        for _ in 0..MAX_DAMPING_TRIES {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].max(1e-9);
            }
            let step = match damped.cholesky() {
                Some(ch) => -ch.solve(&b),
                None => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let rho = step.fixed_rows::<3>(0).into_owned();
            let phi = step.fixed_rows::<3>(3).into_owned();
            let candidate = Pose::exp(&rho, &phi) * pose;
            let new_cost = registration_cost(src, &tgt.cloud, &candidate, &corr);
            if new_cost <= cost {
                lambda = (lambda * 0.1).max(1e-12);
                accepted = Some((candidate, new_cost, rho.norm(), phi.norm()));
                break;
            }
            lambda *= 10.0;
        }

        match accepted {
            Some((candidate, new_cost, dt, dr)) => {
                pose = candidate;
                result.pose = pose;
                result.final_cost = new_cost;
                result.cost_trace.push((cost, new_cost));
                if dt < cfg.translation_eps && dr < cfg.rotation_eps {
                    result.converged = true;
                    break;
                }
            }
            None => {
                // No descent direction left at this association: a stationary point.
                result.converged = true;
                break;
            }
        }
    }
    Ok(result)
}

/// Registration target built from keyframe clouds in world coordinates.
#[derive(Clone, Debug, Default)]
pub struct ReferenceMap {
    indexed: Option<IndexedCloud>,
    generation: u64,
}

impl ReferenceMap {
    pub fn is_empty(&self) -> bool {
        self.indexed.as_ref().is_none_or(|c| c.is_empty())
    }

    pub fn len(&self) -> usize {
        self.indexed.as_ref().map_or(0, |c| c.len())
    }

    /// Bumped every time the reference (and its kd-tree) is rebuilt.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn indexed(&self) -> Option<&IndexedCloud> {
        self.indexed.as_ref()
    }

    /// Add a keyframe cloud given its world-from-camera pose.
    pub fn insert_keyframe(&mut self, frame: &GaussianCloud, world_from_cam: &Pose, cfg: &TrackerConfig) {
        let world = frame.transformed(world_from_cam);
        let merged = match (cfg.reference, self.indexed.take()) {
            (ReferencePolicy::Map, Some(existing)) => {
                let mut cloud = existing.cloud;
                let mut occupied = HashMap::new();
                voxel_keep_mask(&cloud.cloud.points, cfg.voxel_downsample, &mut occupied);
                let keep = voxel_keep_mask(&world.cloud.points, cfg.voxel_downsample, &mut occupied);
                for (i, k) in keep.iter().enumerate() {
                    if *k {
                        cloud.cloud.points.push(world.cloud.points[i]);
                        cloud.covariances.push(world.covariances[i]);
                    }
                }
                cloud.cloud.colors = None;
                cloud
            }
            _ => {
                let keep = voxel_keep_mask(&world.cloud.points, cfg.voxel_downsample, &mut HashMap::new());
                GaussianCloud {
                    cloud: PointCloud::new(
                        world.cloud.points.iter().zip(&keep).filter(|(_, k)| **k).map(|(p, _)| *p).collect(),
                    ),
                    covariances: world.covariances.iter().zip(&keep).filter(|(_, k)| **k).map(|(c, _)| *c).collect(),
                }
            }
        };
        self.indexed = Some(IndexedCloud::new(merged));
        self.generation += 1;
    }
}

/// Register `frame_cloud` against the reference, seeded with `imu_guess`
/// (world-from-camera). The first call bootstraps the reference and returns
/// identity. A degenerate registration falls back to the guess with
/// `converged = false`.
pub fn track_frame(
    frame_cloud: &GaussianCloud,
    reference: &mut ReferenceMap,
    imu_guess: &Pose,
    cfg: &TrackerConfig,
) -> Result<TrackingResult> {
    if frame_cloud.is_empty() {
        return Err(Error::EmptyFrame);
    }
    let target = match reference.indexed() {
        Some(t) if !t.is_empty() => t,
        _ => {
            reference.insert_keyframe(frame_cloud, &Pose::identity(), cfg);
            return Ok(TrackingResult::fixed(Pose::identity(), true));
        }
    };
    match optimize_pose(frame_cloud, target, imu_guess, cfg) {
        Ok(r) => Ok(r),
        Err(Error::DegenerateGeometry(n)) => {
            log::warn!("degenerate registration ({n} correspondences); keeping the initial guess");
            Ok(TrackingResult::fixed(*imu_guess, false))
        }
        Err(e) => Err(e),
    }
}

/// Backproject, downsample and attach covariances: the per-frame cloud used
/// for both tracking and map seeding.
pub fn frame_cloud(
    depth: &Image,
    intrinsics: &CameraIntrinsics,
    rgb: Option<&Image>,
    cfg: &TrackerConfig,
) -> Result<GaussianCloud> {
    let raw = backproject(depth, intrinsics, rgb, cfg.stride)?;
    let cloud = voxel_downsample(&raw, cfg.voxel_downsample);
    if cloud.is_empty() {
        return Err(Error::EmptyFrame);
    }
    estimate_covariances(&cloud, cfg.knn_k, cfg.cov_floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::Rotation;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 50.0,
            fy: 50.0,
            cx: 10.0,
            cy: 8.0,
            width: 21,
            height: 17,
        }
    }

    #[test]
    fn backproject_examples() {
        let k = intrinsics();
        let mut depth = Image::new(k.width, k.height, 1);
        depth.set(10, 8, 0, 2.0);
        let c = backproject(&depth, &k, None, 1).unwrap();
        assert_eq!(c.points, vec![Vec3::new(0.0, 0.0, 2.0)]);

        let k2 = CameraIntrinsics { fx: 5.0, fy: 5.0, ..k };
        let mut depth = Image::new(k.width, k.height, 1);
        depth.set(15, 8, 0, 1.0);
        let c = backproject(&depth, &k2, None, 1).unwrap();
        assert_relative_eq!(c.points[0], Vec3::new(1.0, 0.0, 1.0), epsilon = 1e-15);

        let zeros = Image::new(k.width, k.height, 1);
        assert!(backproject(&zeros, &k, None, 1).unwrap().is_empty());
    }

    #[test]
    fn backproject_filters_and_colors() {
        let k = intrinsics();
        let mut depth = Image::filled(k.width, k.height, 1, 25.0);
        depth.set(0, 0, 0, 1.0);
        let rgb = Image::from_fn(k.width, k.height, 3, |x, _, c| if c == 0 { x as f64 / 20.0 } else { 0.5 });
        let c = backproject(&depth, &k, Some(&rgb), 1).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.colors.unwrap()[0], Vec3::new(0.0, 0.5, 0.5));

        let bad = Image::new(3, 3, 1);
        assert!(matches!(backproject(&bad, &k, None, 1), Err(Error::InvalidArgument(_))));
        assert!(backproject(&depth, &k, None, 0).is_err());
    }

    #[test]
    fn stride_subsamples_grid() {
        let k = intrinsics();
        let depth = Image::filled(k.width, k.height, 1, 1.0);
        let c = backproject(&depth, &k, None, 2).unwrap();
        assert_eq!(c.len(), 11 * 9);
    }

    #[test]
    fn planar_covariance_normal() {
        let pts: Vec<Vec3> = (0..100)
            .map(|i| Vec3::new((i % 10) as f64 * 0.1, (i / 10) as f64 * 0.1 + 0.013 * (i % 3) as f64, 0.0))
            .collect();
        let g = estimate_covariances(&PointCloud::new(pts), 10, 1e-3).unwrap();
        for cov in &g.covariances {
            let eig = SymmetricEigen::new(*cov);
            let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            vals.sort_by(f64::total_cmp);
            assert_relative_eq!(vals[0], 1e-3, epsilon = 1e-12);
            assert_relative_eq!(vals[1], 1.0, epsilon = 1e-12);
            assert_relative_eq!(vals[2], 1.0, epsilon = 1e-12);
            let n = eig.eigenvectors.column(eig.eigenvalues.imin()).into_owned();
            assert!((n.z.abs() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn isotropic_ball_spectrum_is_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..200)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let g = estimate_covariances(&PointCloud::new(pts), 10, 1e-3).unwrap();
        for cov in &g.covariances {
            let mut vals: Vec<f64> = SymmetricEigen::new(*cov).eigenvalues.iter().copied().collect();
            vals.sort_by(f64::total_cmp);
            assert_relative_eq!(vals[0], 1e-3, epsilon = 1e-9);
            assert_relative_eq!(vals[2], 1.0, epsilon = 1e-9);
            assert!((cov - cov.transpose()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn too_few_points() {
        let pts = vec![Vec3::zeros(); 5];
        assert!(matches!(
            estimate_covariances(&PointCloud::new(pts), 10, 1e-3),
            Err(Error::InsufficientPoints { needed: 11, got: 5 })
        ));
    }

    fn blob(seed: u64, n: usize) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..0.3)))
            .collect();
        estimate_covariances(&PointCloud::new(pts), 10, 1e-3).unwrap()
    }

    #[test]
    fn correspondence_examples() {
        let src = blob(5, 300);
        let tgt = IndexedCloud::new(src.clone());
        let corr = find_correspondences(&src, &tgt, &Pose::identity(), 0.2).unwrap();
        assert_eq!(corr.len(), src.len());
        assert!(corr.iter().all(|c| c.src_idx == c.tgt_idx));

        // Source shifted far beyond the gate.
        let shift = Pose::from_translation(Vec3::new(2.0 * 0.2 + 3.0, 0.0, 0.0));
        let moved = IndexedCloud::new(src.transformed(&shift));
        assert!(find_correspondences(&src, &moved, &Pose::identity(), 0.2).unwrap().is_empty());
        let corr = find_correspondences(&src, &moved, &shift, 0.2).unwrap();
        assert_eq!(corr.len(), src.len());
        assert!(corr.iter().all(|c| c.src_idx == c.tgt_idx));

        let empty = IndexedCloud::new(GaussianCloud::default());
        assert!(matches!(find_correspondences(&src, &empty, &Pose::identity(), 0.2), Err(Error::EmptyTarget)));
    }

    #[test]
    fn identical_clouds_register_to_identity() {
        let src = blob(6, 400);
        let tgt = IndexedCloud::new(src.clone());
        let r = optimize_pose(&src, &tgt, &Pose::identity(), &TrackerConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.final_cost < 1e-10);
        assert!(r.pose.translation.norm() < 1e-9);
    }

    #[test]
    fn degenerate_registration_falls_back() {
        let src = blob(8, 50);
        let far = IndexedCloud::new(src.transformed(&Pose::from_translation(Vec3::new(10.0, 0.0, 0.0))));
        let cfg = TrackerConfig::default();
        assert!(matches!(optimize_pose(&src, &far, &Pose::identity(), &cfg), Err(Error::DegenerateGeometry(0))));

        let mut reference = ReferenceMap::default();
        reference.insert_keyframe(far.cloud(), &Pose::identity(), &cfg);
        let guess = Pose::new(Rotation::exp(&Vec3::new(0.0, 0.0, 0.1)), Vec3::new(0.3, 0.0, 0.0));
        let r = track_frame(&src, &mut reference, &guess, &cfg).unwrap();
        assert!(!r.converged);
        assert_eq!(r.pose, guess);
    }

    #[test]
    fn first_frame_bootstraps() {
        let frame = blob(9, 100);
        let mut reference = ReferenceMap::default();
        let cfg = TrackerConfig::default();
        let r = track_frame(&frame, &mut reference, &Pose::from_translation(Vec3::new(1.0, 0.0, 0.0)), &cfg).unwrap();
        assert_eq!(r.pose, Pose::identity());
        assert!(!reference.is_empty());
        assert_eq!(reference.generation(), 1);
        assert!(matches!(
            track_frame(&GaussianCloud::default(), &mut reference, &Pose::identity(), &cfg),
            Err(Error::EmptyFrame)
        ));
    }

    #[test]
    fn voxel_downsample_keeps_first() {
        let c = PointCloud::new(vec![Vec3::new(0.01, 0.0, 0.0), Vec3::new(0.02, 0.0, 0.0), Vec3::new(0.2, 0.0, 0.0)]);
        let d = voxel_downsample(&c, 0.05);
        assert_eq!(d.points, vec![Vec3::new(0.01, 0.0, 0.0), Vec3::new(0.2, 0.0, 0.0)]);
    }

    #[test]
    fn config_validation() {
        assert!(TrackerConfig::default().validate().is_ok());
        assert!(TrackerConfig { knn_k: 3, ..Default::default() }.validate().is_err());
        assert!(TrackerConfig { max_correspondence_dist: 0.0, ..Default::default() }.validate().is_err());
    }
}
