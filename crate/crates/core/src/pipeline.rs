//! The per-frame tracking and mapping loop.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;
use std::time::Instant;

use crate::config::KeyValues;
use crate::dataset::SequenceManifest;
use crate::error::{Error, Result};
use crate::gicp::{frame_cloud, track_frame, GaussianCloud, ReferenceMap, ReferencePolicy, TrackerConfig};
use crate::imu::{
    window_samples, ExtrinsicMode, Extrinsics, GravityModel, ImuBias, ImuFrontEnd, ImuSample, NavState,
};
use crate::metrics::{ate_rmse, psnr, ssim, MetricsReport, Trajectory};
use crate::raster::Image;
use crate::se3::{Pose, Vec3};
use crate::splat::{
    export_render, optimize_map, render, seed_from_cloud, select_keyframe, CameraModel, GaussianMap,
    MappingConfig, MappingKeyframe,
};

/// How the tracker's starting pose for each frame is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InitMode {
    /// Preintegrated IMU motion applied to the previous pose.
    #[default]
    Imu,
    /// The previous pose.
    Identity,
    /// The previous inter-frame motion repeated.
    ConstantVelocity,
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imu" => Ok(Self::Imu),
            "identity" => Ok(Self::Identity),
            "constant-velocity" | "constant_velocity" => Ok(Self::ConstantVelocity),
            other => Err(Error::invalid(format!(
                "unknown init mode `{other}` (expected imu, identity or constant-velocity)"
            ))),
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Imu => "imu",
            Self::Identity => "identity",
            Self::ConstantVelocity => "constant-velocity",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub tracker: TrackerConfig,
    pub mapping: MappingConfig,
    /// Overrides the calibration bias when set.
    pub bias: Option<ImuBias>,
    /// Gravity reaction expressed in the IMU frame at the first frame.
    /// Falls back to the calibration, then to the mean pre-roll accelerometer
    /// reading.
    pub gravity: Option<GravityModel>,
    /// Overrides the calibration extrinsics when set.
    pub extrinsics: Option<Extrinsics>,
    pub extrinsic_mode: ExtrinsicMode,
    pub init: InitMode,
    pub mapping_enabled: bool,
    /// Run map optimization on a worker thread.
    pub async_mapping: bool,
    /// Seconds of IMU data before the first frame averaged for gravity.
    pub gravity_window: f64,
    /// Render every keyframe after the run and score it against its image.
    pub evaluate_renders: bool,
    pub output: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tracker: TrackerConfig::default(),
            mapping: MappingConfig::default(),
            bias: None,
            gravity: None,
            extrinsics: None,
            extrinsic_mode: ExtrinsicMode::default(),
            init: InitMode::Imu,
            mapping_enabled: true,
            async_mapping: false,
            gravity_window: 0.1,
            evaluate_renders: true,
            output: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.tracker.validate()?;
        self.mapping.validate()?;
        if let Some(b) = &self.bias {
            b.validate()?;
        }
        if !(self.gravity_window > 0.0) {
            return Err(Error::invalid("imu.gravity_window must be positive"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path)?)
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        Self::from_key_values(&KeyValues::parse(text, source)?)
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&[
            "tracker.knn_k",
            "tracker.max_iterations",
            "tracker.translation_eps",
            "tracker.rotation_eps",
            "tracker.max_correspondence_dist",
            "tracker.voxel_downsample",
            "tracker.cov_floor",
            "tracker.stride",
            "tracker.reference",
            "mapping.lambda_i",
            "mapping.lambda_d",
            "mapping.iterations_per_keyframe",
            "mapping.window",
            "mapping.lr_mean",
            "mapping.lr_color",
            "mapping.lr_opacity",
            "mapping.lr_scale",
            "mapping.lr_rotation",
            "mapping.opacity_init",
            "mapping.prune_opacity",
            "mapping.keyframe_translation",
            "mapping.keyframe_rotation_deg",
            "mapping.seed",
            "mapping.enabled",
            "mapping.async",
            "mapping.evaluate_renders",
            "imu.accel_bias",
            "imu.gyro_bias",
            "imu.gravity",
            "imu.imu_to_camera",
            "imu.extrinsic_mode",
            "imu.gravity_window",
            "pipeline.init",
            "pipeline.output",
        ])?;
        let mut c = Self::default();
        let t = &mut c.tracker;
        kv.set("tracker.knn_k", &mut t.knn_k)?;
        kv.set("tracker.max_iterations", &mut t.max_iterations)?;
        kv.set("tracker.translation_eps", &mut t.translation_eps)?;
        kv.set("tracker.rotation_eps", &mut t.rotation_eps)?;
        kv.set("tracker.max_correspondence_dist", &mut t.max_correspondence_dist)?;
        kv.set("tracker.voxel_downsample", &mut t.voxel_downsample)?;
        kv.set("tracker.cov_floor", &mut t.cov_floor)?;
        kv.set("tracker.stride", &mut t.stride)?;
        if let Some(e) = kv.get("tracker.reference") {
            t.reference = match e.value.as_str() {
                "map" => ReferencePolicy::Map,
                "last_keyframe" | "last-keyframe" => ReferencePolicy::LastKeyframe,
                other => return Err(Error::parse(kv.location(e), format!("unknown reference policy `{other}`"))),
            };
        }
        let m = &mut c.mapping;
        kv.set("mapping.lambda_i", &mut m.lambda_i)?;
        kv.set("mapping.lambda_d", &mut m.lambda_d)?;
        kv.set("mapping.iterations_per_keyframe", &mut m.iterations_per_keyframe)?;
        kv.set("mapping.window", &mut m.window)?;
        kv.set("mapping.lr_mean", &mut m.lr_mean)?;
        kv.set("mapping.lr_color", &mut m.lr_color)?;
        kv.set("mapping.lr_opacity", &mut m.lr_opacity)?;
        kv.set("mapping.lr_scale", &mut m.lr_scale)?;
        kv.set("mapping.lr_rotation", &mut m.lr_rotation)?;
        kv.set("mapping.opacity_init", &mut m.opacity_init)?;
        kv.set("mapping.prune_opacity", &mut m.prune_opacity)?;
        kv.set("mapping.keyframe_translation", &mut m.keyframe_translation)?;
        if let Some(deg) = kv.value::<f64>("mapping.keyframe_rotation_deg")? {
            m.keyframe_rotation = deg.to_radians();
        }
        kv.set("mapping.seed", &mut m.seed)?;
        if let Some(b) = kv.boolean("mapping.enabled")? {
            c.mapping_enabled = b;
        }
        if let Some(b) = kv.boolean("mapping.async")? {
            c.async_mapping = b;
        }
        if let Some(b) = kv.boolean("mapping.evaluate_renders")? {
            c.evaluate_renders = b;
        }

        let accel = kv.vec3("imu.accel_bias")?;
        let gyro = kv.vec3("imu.gyro_bias")?;
        if accel.is_some() || gyro.is_some() {
            c.bias = Some(ImuBias::new(accel.unwrap_or_default(), gyro.unwrap_or_default())?);
        }
        if let Some(g) = kv.vec3("imu.gravity")? {
            c.gravity = Some(GravityModel::new(g)?);
        }
        if let Some(p) = kv.pose("imu.imu_to_camera")? {
            c.extrinsics = Some(Extrinsics::new(p));
        }
        if let Some(e) = kv.get("imu.extrinsic_mode") {
            c.extrinsic_mode = match e.value.as_str() {
                "similarity" => ExtrinsicMode::Similarity,
                "literal" => ExtrinsicMode::Literal,
                other => return Err(Error::parse(kv.location(e), format!("unknown extrinsic mode `{other}`"))),
            };
        }
        kv.set("imu.gravity_window", &mut c.gravity_window)?;
        if let Some(e) = kv.get("pipeline.init") {
            c.init = e.value.parse().map_err(|err: Error| Error::parse(kv.location(e), err.to_string()))?;
        }
        if let Some(e) = kv.get("pipeline.output") {
            c.output = Some(PathBuf::from(&e.value));
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSummary {
    pub timestamp: f64,
    /// Camera-from-world starting pose handed to the tracker.
    pub guess: Pose,
    pub converged: bool,
    pub iterations: usize,
    pub final_cost: f64,
    pub inlier_count: usize,
    pub keyframe: bool,
}

/// Photometric quality of one keyframe around its map update.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeUpdate {
    pub frame: usize,
    pub seeded: usize,
    pub psnr_before: f64,
    pub psnr_after: f64,
    pub loss_trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    /// World-from-camera poses; the world frame is the first camera.
    pub trajectory: Trajectory,
    pub frames: Vec<FrameSummary>,
    pub keyframes: Vec<usize>,
    pub updates: Vec<KeyframeUpdate>,
    pub metrics: MetricsReport,
    pub map: GaussianMap,
    /// Wall-clock seconds per stage.
    pub timings: Vec<(String, f64)>,
}

#[derive(Default)]
struct StageClock(Vec<(String, f64)>);

impl StageClock {
    fn add(&mut self, stage: &str, started: Instant) {
        let secs = started.elapsed().as_secs_f64();
        match self.0.iter_mut().find(|(s, _)| s == stage) {
            Some(entry) => entry.1 += secs,
            None => self.0.push((stage.to_string(), secs)),
        }
    }
}

struct MapJob {
    frame: usize,
    cloud: GaussianCloud,
    keyframe: MappingKeyframe,
}

/// Owns the Gaussian map; fed keyframes in order, either inline or from a
/// worker thread. Tracking never reads it.
struct Mapper {
    cfg: MappingConfig,
    map: GaussianMap,
    keyframes: Vec<MappingKeyframe>,
    updates: Vec<KeyframeUpdate>,
    seconds: f64,
}

impl Mapper {
    fn new(cfg: MappingConfig) -> Self {
        Self {
            cfg,
            map: GaussianMap::new(),
            keyframes: Vec::new(),
            updates: Vec::new(),
            seconds: 0.0,
        }
    }

    fn process(&mut self, job: MapJob) -> Result<()> {
        let started = Instant::now();
        let kf = job.keyframe;
        let seeded = seed_from_cloud(&mut self.map, &job.cloud, &kf.camera.pose, &self.cfg).map_err(|e| e.at_frame(job.frame))?;
        let psnr_before = psnr(&render(&self.map, &kf.camera).color, &kf.rgb, 1.0)?;
        self.keyframes.push(kf);
        let loss_trace = optimize_map(&mut self.map, &self.keyframes, &self.cfg).map_err(|e| e.at_frame(job.frame))?;
        let kf = self.keyframes.last().expect("pushed above");
        let psnr_after = psnr(&render(&self.map, &kf.camera).color, &kf.rgb, 1.0)?;
        log::debug!(
            "keyframe {}: +{seeded} gaussians, psnr {psnr_before:.2} -> {psnr_after:.2} dB",
            job.frame
        );
        self.updates.push(KeyframeUpdate {
            frame: job.frame,
            seeded,
            psnr_before,
            psnr_after,
            loss_trace,
        });
        self.seconds += started.elapsed().as_secs_f64();
        Ok(())
    }
}

fn mean_accel(samples: &[ImuSample], t_end: f64, window: f64) -> Option<Vec3> {
    let picked: Vec<Vec3> = samples
        .iter()
        .filter(|s| s.timestamp >= t_end - window && s.timestamp <= t_end)
        .map(|s| s.accel)
        .collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<Vec3>() / picked.len() as f64)
}

/// Track and map a whole sequence.
pub fn run_sequence(manifest: &SequenceManifest, cfg: &PipelineConfig) -> Result<RunReport> {
    cfg.validate()?;
    if manifest.is_empty() {
        return Err(Error::EmptyFrame);
    }
    let calib = &manifest.calibration;
    let intrinsics = calib.intrinsics;
    let ext = cfg.extrinsics.unwrap_or(calib.extrinsics);
    let bias = cfg.bias.unwrap_or(calib.bias);
    let t0 = manifest.frames[0].timestamp;
    let mut clock = StageClock::default();

    // The tracking world is the first camera frame; express the initial IMU
    // state there.
    let world_from_imu0 = *ext.cam_from_imu();
    let r0 = world_from_imu0.rotation;
    let gravity_imu = match (&cfg.gravity, calib.initial_gravity) {
        (Some(g), _) => g.gravity_world,
        (None, Some(g)) => g,
        (None, None) => {
            let window = window_samples(&manifest.imu, t0 - cfg.gravity_window, t0)?;
            mean_accel(&window, t0, cfg.gravity_window).ok_or(Error::Coverage {
                start: t0 - cfg.gravity_window,
                end: t0,
            })? - bias.accel
        }
    };
    let gravity = GravityModel::custom(r0.rotate(&gravity_imu));
    let mut front = ImuFrontEnd::new(NavState {
        position: world_from_imu0.translation,
        velocity: r0.rotate(&calib.initial_velocity.unwrap_or_default()),
        rotation: r0,
        timestamp: t0,
    });

    let mut reference = ReferenceMap::default();
    let mut poses: Vec<Pose> = Vec::with_capacity(manifest.len());
    let mut frames = Vec::with_capacity(manifest.len());
    let mut keyframes = Vec::new();
    let mut last_keyframe: Option<Pose> = None;
    let mut mapper = Mapper::new(cfg.mapping.clone());
    let mut keyframe_images: Vec<(usize, Image, Pose)> = Vec::new();

    std::thread::scope(|scope| -> Result<()> {
        let (tx, worker) = if cfg.mapping_enabled && cfg.async_mapping {
            let (tx, rx) = mpsc::channel::<MapJob>();
            let mut m = Mapper::new(cfg.mapping.clone());
            let handle = scope.spawn(move || -> Result<Mapper> {
                for job in rx {
                    m.process(job)?;
                }
                Ok(m)
            });
            (Some(tx), Some(handle))
        } else {
            (None, None)
        };

        for (k, record) in manifest.frames.iter().enumerate() {
            let started = Instant::now();
            let (rgb, depth) = manifest.load_frame(k).map_err(|e| e.at_frame(k))?;
            let cloud = frame_cloud(&depth, &intrinsics, Some(&rgb), &cfg.tracker).map_err(|e| e.at_frame(k))?;
            clock.add("load", started);

            let started = Instant::now();
            let guess = if k == 0 {
                Pose::identity()
            } else {
                let t_prev = manifest.frames[k - 1].timestamp;
                front
                    .accumulate(&manifest.imu, t_prev, record.timestamp, &bias)
                    .map_err(|e| e.at_frame(k))?;
                let prev = poses[k - 1];
                match cfg.init {
                    InitMode::Imu => {
                        let rel = front.predict(&gravity).inverse();
                        crate::imu::initial_guess_camera(&rel, &prev, &ext, cfg.extrinsic_mode)
                    }
                    InitMode::Identity => prev,
                    InitMode::ConstantVelocity if k >= 2 => prev.compose(&poses[k - 2].inverse()).compose(&prev),
                    // No motion history yet: move the camera by the initial velocity.
                    InitMode::ConstantVelocity => {
                        let shift = Pose::from_translation(front.state.velocity * (record.timestamp - t_prev));
                        shift.compose(&prev.inverse()).inverse()
                    }
                }
            };
            clock.add("imu", started);

            let started = Instant::now();
            let result = track_frame(&cloud, &mut reference, &guess.inverse(), &cfg.tracker).map_err(|e| e.at_frame(k))?;
            if !result.converged {
                log::warn!("frame {k}: tracking did not converge; using the initial guess");
            }
            let pose = if result.converged { result.pose.inverse() } else { guess };
            clock.add("tracking", started);

            if k > 0 {
                let dt = record.timestamp - manifest.frames[k - 1].timestamp;
                front
                    .reset(&poses[k - 1], &pose, &ext, dt, record.timestamp)
                    .map_err(|e| e.at_frame(k))?;
            }
            poses.push(pose);

            let is_keyframe = select_keyframe(&pose, last_keyframe.as_ref(), &cfg.mapping);
            if is_keyframe {
                if k > 0 {
                    reference.insert_keyframe(&cloud, &pose.inverse(), &cfg.tracker);
                }
                last_keyframe = Some(pose);
                keyframes.push(k);
                if cfg.mapping_enabled {
                    let job = MapJob {
                        frame: k,
                        cloud,
                        keyframe: MappingKeyframe {
                            camera: CameraModel::new(intrinsics, pose),
                            rgb: rgb.clone(),
                            depth,
                        },
                    };
                    match &tx {
                        Some(tx) => tx.send(job).map_err(|_| Error::invalid("mapping worker stopped"))?,
                        None => mapper.process(job)?,
                    }
                    keyframe_images.push((k, rgb, pose));
                }
            }
            frames.push(FrameSummary {
                timestamp: record.timestamp,
                guess,
                converged: result.converged,
                iterations: result.iterations,
                final_cost: result.final_cost,
                inlier_count: result.inlier_count,
                keyframe: is_keyframe,
            });
        }
        drop(tx);
        if let Some(handle) = worker {
            mapper = handle.join().map_err(|_| Error::invalid("mapping worker panicked"))??;
        }
        Ok(())
    })?;
    clock.0.push(("mapping".to_string(), mapper.seconds));

    let trajectory = Trajectory::new(
        manifest
            .frames
            .iter()
            .zip(&poses)
            .map(|(f, p)| (f.timestamp, p.inverse()))
            .collect(),
    )?;
    let mut metrics = MetricsReport {
        frame_count: poses.len(),
        ..Default::default()
    };
    if let Some(gt) = &manifest.groundtruth {
        metrics.ate_rmse = Some(match ate_rmse(&trajectory, gt, true) {
            Ok((rmse, _)) => rmse,
            Err(Error::InsufficientOverlap { .. }) => anchored_ate(&trajectory, gt)?,
            Err(e) => return Err(e),
        });
    }
    if cfg.mapping_enabled && cfg.evaluate_renders {
        let started = Instant::now();
        for (_, rgb, pose) in &keyframe_images {
            let out = render(&mapper.map, &CameraModel::new(intrinsics, *pose));
            metrics.psnr.push(psnr(&out.color, rgb, 1.0)?);
            metrics.ssim.push(ssim(&out.color, rgb)?);
        }
        clock.add("evaluation", started);
    }
    metrics.runtime = clock.0.clone();

    let report = RunReport {
        trajectory,
        frames,
        keyframes,
        updates: mapper.updates,
        metrics,
        map: mapper.map,
        timings: clock.0,
    };
    if let Some(dir) = &cfg.output {
        write_outputs(&report, dir, &keyframe_images, manifest)?;
    }
    Ok(report)
}

/// ATE for sequences too short for a least-squares alignment: the estimate
/// is mapped onto the reference through their first poses.
fn anchored_ate(est: &Trajectory, reference: &Trajectory) -> Result<f64> {
    let (t0, first) = est.entries()[0];
    let anchor = reference
        .nearest(t0, 0.02)
        .ok_or(Error::InsufficientOverlap { pairs: 0 })?
        .1
        .compose(&first.inverse());
    let moved = Trajectory::new(est.entries().iter().map(|(t, p)| (*t, anchor.compose(p))).collect())?;
    let mut sum = 0.0;
    let mut n = 0;
    for (t, p) in moved.entries() {
        if let Some((_, q)) = reference.nearest(*t, 0.02) {
            sum += (p.translation - q.translation).norm_squared();
            n += 1;
        }
    }
    Ok((sum / n as f64).sqrt())
}

/// Trajectory, metrics, map and keyframe renders.
pub fn write_outputs(
    report: &RunReport,
    dir: &Path,
    keyframe_images: &[(usize, Image, Pose)],
    manifest: &SequenceManifest,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    report.trajectory.save_tum(&dir.join("trajectory.txt"))?;
    report.metrics.write(&dir.join("metrics.txt"))?;
    let intrinsics = manifest.calibration.intrinsics;
    if !report.map.is_empty() {
        report.map.save(&dir.join("map.txt"), Some(&intrinsics))?;
        let renders = dir.join("renders");
        std::fs::create_dir_all(&renders)?;
        for (k, _, pose) in keyframe_images {
            let out = render(&report.map, &CameraModel::new(intrinsics, *pose));
            export_render(&out, &renders.join(format!("kf_{k:04}.png")), None)?;
        }
    }
    Ok(())
}
