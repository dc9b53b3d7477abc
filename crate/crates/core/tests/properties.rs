mod common;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vigs_core::config::KeyValues;
use vigs_core::dataset::Calibration;
use vigs_core::imu::{preintegrate, Extrinsics, ImuBias, ImuSample};
use vigs_core::kdtree::KdTree;
use vigs_core::metrics::{ate_rmse, psnr, ssim, Trajectory};
use vigs_core::raster::Image;
use vigs_core::se3::{Pose, Rotation, Vec3};
use vigs_core::splat::{render, GaussianMap};

fn vec3(range: f64) -> impl Strategy<Value = Vec3> {
    (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn pose() -> impl Strategy<Value = Pose> {
    (vec3(2.5), vec3(5.0)).prop_map(|(w, t)| Pose::new(Rotation::exp(&w), t))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kdtree_matches_brute_force(points in prop::collection::vec(vec3(1.0), 1..80), q in vec3(1.2)) {
        // Snap to a coarse grid so exact distance ties occur.
        let points: Vec<Vec3> = points.iter().map(|p| (p * 4.0).map(f64::round) / 4.0).collect();
        let tree = KdTree::new(points.clone());
        let best = points
            .iter()
            .enumerate()
            .map(|(i, p)| ((p - q).norm_squared(), i))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .unwrap();
        let hit = tree.nearest(&q, f64::INFINITY).unwrap();
        prop_assert_eq!(hit.index, best.1);
        prop_assert_eq!(hit.dist_sq, best.0);
    }

    #[test]
    fn preintegration_splits_at_samples(
        accel in vec3(3.0), gyro in vec3(1.0), jerk in vec3(2.0), split in 5usize..35,
    ) {
        let samples: Vec<ImuSample> = (0..=40)
            .map(|i| {
                let t = i as f64 * 0.005;
                ImuSample::new(t, accel + jerk * t + Vec3::new(0.0, 0.0, 9.81), gyro * (1.0 + t))
            })
            .collect();
        let bias = ImuBias::zero();
        let mid = samples[split].timestamp;
        let whole = preintegrate(&samples, 0.0, 0.2, &bias).unwrap();
        let parts = preintegrate(&samples, 0.0, mid, &bias)
            .unwrap()
            .append(&preintegrate(&samples, mid, 0.2, &bias).unwrap());
        prop_assert!((whole.alpha - parts.alpha).norm() < 1e-9);
        prop_assert!((whole.beta - parts.beta).norm() < 1e-9);
        prop_assert!((whole.gamma.matrix() - parts.gamma.matrix()).norm() < 1e-9);
    }

    #[test]
    fn ate_is_alignment_invariant(w in pose(), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries: Vec<(f64, Pose)> = (0..12)
            .map(|i| (i as f64 * 0.1, Pose::new(random_rotation(&mut rng, 3.0), random_unit(&mut rng) * (i as f64))))
            .collect();
        let reference = Trajectory::new(entries.clone()).unwrap();
        let moved = Trajectory::new(entries.iter().map(|(t, p)| (*t, w.compose(p))).collect()).unwrap();
        prop_assert!(ate_rmse(&moved, &reference, true).unwrap().0 < 1e-9);
    }

    #[test]
    fn tum_text_roundtrips(p in pose(), t in 0.0f64..1e4) {
        let t = (t * 1e6).round() / 1e6;
        let traj = Trajectory::new(vec![(t, p)]).unwrap();
        let back = Trajectory::parse_tum(&traj.to_tum_string(), "mem").unwrap();
        let (dt, dr) = back.entries()[0].1.delta(&p);
        prop_assert!(dt < 1e-6 && dr < 1e-5);
        prop_assert_eq!(back.entries()[0].0, t);
    }

    #[test]
    fn calibration_roundtrips(ext in pose(), ab in vec3(0.5), gb in vec3(0.05), offset in -0.05f64..0.05) {
        let mut calib = Calibration {
            intrinsics: small_camera(32, 24, 20.0).intrinsics,
            extrinsics: Extrinsics::new(ext),
            bias: ImuBias::new(ab, gb).unwrap(),
            depth_scale: 0.001,
            time_offset: offset,
            initial_velocity: Some(ab),
            initial_gravity: None,
        };
        let back = Calibration::parse(&KeyValues::parse(&calib.to_text(), "mem").unwrap()).unwrap();
        let (dt, dr) = back.extrinsics.cam_from_imu().delta(calib.extrinsics.cam_from_imu());
        prop_assert!(dt < 1e-12 && dr < 1e-9);
        calib.extrinsics = back.extrinsics;
        prop_assert_eq!(back, calib);
    }

    #[test]
    fn compositing_stays_in_range(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_scene(&mut rng, 12);
        let out = render(&map, &small_camera(10, 8, 9.0));
        prop_assert!(out.opacity.data.iter().all(|o| (0.0..=1.0).contains(o)));
        prop_assert!(out.color.data.iter().all(|c| (0.0..=1.0 + 1e-12).contains(c)));
        let mut shuffled = map.clone();
        shuffled.gaussians.shuffle(&mut rng);
        prop_assert_eq!(render(&shuffled, &small_camera(10, 8, 9.0)), out);
    }

    #[test]
    fn map_text_roundtrips(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = random_scene(&mut rng, 6);
        let (back, intr) = GaussianMap::parse(&map.to_text(None), "mem").unwrap();
        prop_assert!(intr.is_none());
        prop_assert_eq!(back.len(), map.len());
        for (a, b) in map.gaussians.iter().zip(&back.gaussians) {
            prop_assert!((a.mean - b.mean).norm() < 1e-9);
            prop_assert!((a.scales - b.scales).norm() < 1e-9);
            prop_assert!((a.opacity - b.opacity).abs() < 1e-9);
        }
    }

    #[test]
    fn image_metrics_are_symmetric(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noise = || rand::Rng::random_range(&mut rng, 0.0..1.0);
        let a = Image::from_fn(20, 16, 3, |_, _, _| noise());
        let b = Image::from_fn(20, 16, 3, |_, _, _| noise());
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }
}
