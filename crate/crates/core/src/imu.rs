//! IMU preintegration between RGB-D frames.
//!
//! Conventions used throughout:
//!
//! * Accelerometers report specific force. A level, stationary IMU reads
//!   `(0, 0, +9.81)`, and [`GravityModel`] stores that reaction vector
//!   (`(0, 0, +9.81)` by default) rather than the downward pull.
//! * [`NavState::rotation`] is body-to-world; positions and velocities are
//!   world-frame quantities of the IMU origin.
//! * Camera poses are camera-from-world. Relative camera motion is expressed
//!   in the `k ← k−1` direction so that `T_k = T_{k−1→k} · T_{k−1}` composes
//!   from the left.
//! * Noise terms are zero in every point estimate; no covariance is propagated.

use crate::error::{Error, Result};
use crate::se3::{Pose, Rotation, Vec3};

/// Largest tolerated spacing between consecutive IMU samples.
pub const MAX_SAMPLE_GAP: f64 = 0.1;
/// How far the sample stream may stop short of a requested window edge.
pub const COVERAGE_SLACK: f64 = 0.05;
/// Samples closer than this to a window edge are treated as lying on it.
const EDGE_MERGE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    /// Specific force, m/s².
    pub accel: Vec3,
    /// Angular rate, rad/s.
    pub gyro: Vec3,
}

impl ImuSample {
    pub fn new(timestamp: f64, accel: Vec3, gyro: Vec3) -> Self {
        Self {
            timestamp,
            accel,
            gyro,
        }
    }

    /// Sanity bounds: finite, `|accel| ≤ 200`, `|gyro| ≤ 50`.
    pub fn validate(&self) -> Result<()> {
        let finite = self.timestamp.is_finite()
            && self.accel.iter().chain(self.gyro.iter()).all(|c| c.is_finite());
        if !finite {
            return Err(Error::invalid(format!("non-finite IMU sample at t = {}", self.timestamp)));
        }
        if self.accel.norm() > 200.0 || self.gyro.norm() > 50.0 {
            return Err(Error::invalid(format!(
                "IMU sample at t = {:.6} outside sanity bounds",
                self.timestamp
            )));
        }
        Ok(())
    }

    /// Linear interpolation of accel and gyro at `t` between `a` and `b`.
    pub fn lerp(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
        let span = b.timestamp - a.timestamp;
        let s = if span > 0.0 { (t - a.timestamp) / span } else { 0.0 };
        ImuSample {
            timestamp: t,
            accel: a.accel + (b.accel - a.accel) * s,
            gyro: a.gyro + (b.gyro - a.gyro) * s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ImuBias {
    pub accel: Vec3,
    pub gyro: Vec3,
}

impl ImuBias {
    pub fn new(accel: Vec3, gyro: Vec3) -> Result<Self> {
        let bias = Self { accel, gyro };
        bias.validate()?;
        Ok(bias)
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.accel.iter().chain(self.gyro.iter()).any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite IMU bias"));
        }
        if self.accel.norm() > 1.0 {
            return Err(Error::invalid("accelerometer bias exceeds 1 m/s²"));
        }
        if self.gyro.norm() > 0.1 {
            return Err(Error::invalid("gyroscope bias exceeds 0.1 rad/s"));
        }
        Ok(())
    }
}

/// Gravity reaction in the world frame (what a stationary accelerometer
/// aligned with the world axes reads).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GravityModel {
    pub gravity_world: Vec3,
}

impl Default for GravityModel {
    fn default() -> Self {
        Self {
            gravity_world: Vec3::new(0.0, 0.0, 9.81),
        }
    }
}

impl GravityModel {
    /// Magnitude must lie in `[9.78, 9.84]` m/s².
    pub fn new(gravity_world: Vec3) -> Result<Self> {
        let g = gravity_world.norm();
        if !(9.78..=9.84).contains(&g) {
            return Err(Error::invalid(format!("gravity magnitude {g:.4} outside [9.78, 9.84]")));
        }
        Ok(Self { gravity_world })
    }

    /// Any finite vector, including zero. For synthetic setups.
    pub fn custom(gravity_world: Vec3) -> Self {
        Self { gravity_world }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct NavState {
    pub position: Vec3,
    pub velocity: Vec3,
    /// Body-to-world.
    pub rotation: Rotation,
    pub timestamp: f64,
}

/// Accumulated `(α, β, γ)` over an interval, expressed in the body frame at
/// its start.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreintegrationDelta {
    pub alpha: Vec3,
    pub beta: Vec3,
    pub gamma: Rotation,
    pub duration: f64,
    pub sample_count: usize,
}

impl Default for PreintegrationDelta {
    fn default() -> Self {
        Self::identity()
    }
}

impl PreintegrationDelta {
    pub fn identity() -> Self {
        Self {
            alpha: Vec3::zeros(),
            beta: Vec3::zeros(),
            gamma: Rotation::identity(),
            duration: 0.0,
            sample_count: 0,
        }
    }

    /// Concatenate `self` (over `[a, b]`) with `next` (over `[b, c]`).
    pub fn append(&self, next: &PreintegrationDelta) -> PreintegrationDelta {
        PreintegrationDelta {
            alpha: self.alpha + self.beta * next.duration + self.gamma.rotate(&next.alpha),
            beta: self.beta + self.gamma.rotate(&next.beta),
            gamma: &self.gamma * &next.gamma,
            duration: self.duration + next.duration,
            sample_count: self.sample_count + next.sample_count,
        }
    }
}

/// Fixed camera/IMU mounting.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Extrinsics {
    cam_from_imu: Pose,
    imu_from_cam: Pose,
}

impl Extrinsics {
    pub fn new(cam_from_imu: Pose) -> Self {
        Self {
            cam_from_imu,
            imu_from_cam: cam_from_imu.inverse(),
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn cam_from_imu(&self) -> &Pose {
        &self.cam_from_imu
    }

    pub fn imu_from_cam(&self) -> &Pose {
        &self.imu_from_cam
    }
}

/// How the IMU relative motion is moved into the camera frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ExtrinsicMode {
    /// `T_C = T_CI · T_I · T_IC`, a proper change of frame.
    #[default]
    Similarity,
    /// `T_C = T_CI · T_I`, without the closing inverse extrinsic.
    Literal,
}

/// `(â − b_a, ω̂ − b_ω)`. Gravity is left in; it is handled at prediction.
pub fn correct_sample(s: &ImuSample, bias: &ImuBias) -> (Vec3, Vec3) {
    (s.accel - bias.accel, s.gyro - bias.gyro)
}

/// Advance `delta` across `[prev.timestamp, curr.timestamp]` with the
/// midpoint rule.
pub fn integrate_sample(
    delta: &PreintegrationDelta,
    prev: &ImuSample,
    curr: &ImuSample,
    bias: &ImuBias,
) -> Result<PreintegrationDelta> {
    let dt = curr.timestamp - prev.timestamp;
    if !(dt > 0.0) {
        return Err(Error::Ordering(format!(
            "IMU sample at {:.6} does not follow {:.6}",
            curr.timestamp, prev.timestamp
        )));
    }
    if dt > MAX_SAMPLE_GAP {
        return Err(Error::ImuGap {
            gap: dt,
            max: MAX_SAMPLE_GAP,
            at: prev.timestamp,
        });
    }
    let (a0, w0) = correct_sample(prev, bias);
    let (a1, w1) = correct_sample(curr, bias);
    let w = 0.5 * (w0 + w1);
    let gamma_mid = &delta.gamma * &Rotation::exp(&(w * (0.5 * dt)));
    let accel = gamma_mid.rotate(&(0.5 * (a0 + a1)));

    Ok(PreintegrationDelta {
        alpha: delta.alpha + delta.beta * dt + 0.5 * accel * dt * dt,
        beta: delta.beta + accel * dt,
        gamma: &delta.gamma * &Rotation::exp(&(w * dt)),
        duration: delta.duration + dt,
        sample_count: delta.sample_count + 1,
    })
}

/// Sample value at `t`: interpolated when bracketed, otherwise the nearest
/// end sample held constant. `samples` must be sorted and non-empty.
fn sample_at(samples: &[ImuSample], t: f64) -> ImuSample {
    let idx = samples.partition_point(|s| s.timestamp <= t);
    let mut s = if idx == 0 {
        samples[0]
    } else if idx == samples.len() {
        samples[idx - 1]
    } else {
        ImuSample::lerp(&samples[idx - 1], &samples[idx], t)
    };
    s.timestamp = t;
    s
}

/// Samples covering exactly `[t_start, t_end]`, with the two edge samples
/// synthesized by linear interpolation.
pub fn window_samples(samples: &[ImuSample], t_start: f64, t_end: f64) -> Result<Vec<ImuSample>> {
    if !(t_start <= t_end) {
        return Err(Error::invalid(format!("window [{t_start}, {t_end}] is reversed")));
    }
    let covered = match (samples.first(), samples.last()) {
        (Some(first), Some(last)) => {
            first.timestamp <= t_start + COVERAGE_SLACK && last.timestamp >= t_end - COVERAGE_SLACK
        }
        _ => false,
    };
    if !covered {
        return Err(Error::Coverage {
            start: t_start,
            end: t_end,
        });
    }
    let mut out = vec![sample_at(samples, t_start)];
    out.extend(
        samples
            .iter()
            .filter(|s| s.timestamp > t_start + EDGE_MERGE && s.timestamp < t_end - EDGE_MERGE)
            .copied(),
    );
    if t_end > t_start {
        out.push(sample_at(samples, t_end));
    }
    Ok(out)
}

/// Preintegrate over exactly `[t_start, t_end]`.
pub fn preintegrate(
    samples: &[ImuSample],
    t_start: f64,
    t_end: f64,
    bias: &ImuBias,
) -> Result<PreintegrationDelta> {
    if t_start == t_end {
        return Ok(PreintegrationDelta::identity());
    }
    let window = window_samples(samples, t_start, t_end)?;
    window
        .windows(2)
        .try_fold(PreintegrationDelta::identity(), |delta, pair| {
            integrate_sample(&delta, &pair[0], &pair[1], bias)
        })
}

/// Relative IMU motion over `delta`: the pose of body `k` expressed in body
/// `k−1` (rotation `γ`, translation `R_{k−1}ᵀ(vΔt − ½gΔt²) + α`).
///
/// Feed its [`Pose::inverse`] to [`initial_guess_camera`], which composes in
/// the `k ← k−1` direction.
pub fn predict_relative_pose(delta: &PreintegrationDelta, state: &NavState, gravity: &GravityModel) -> Pose {
    let dt = delta.duration;
    let world_motion = state.velocity * dt - 0.5 * gravity.gravity_world * dt * dt;
    let translation = state.rotation.inverse().rotate(&world_motion) + delta.alpha;
    Pose::new(delta.gamma, translation)
}

/// Propagate a full navigation state across `delta`.
pub fn propagate(delta: &PreintegrationDelta, state: &NavState, gravity: &GravityModel) -> NavState {
    let dt = delta.duration;
    let g = gravity.gravity_world;
    NavState {
        position: state.position + state.velocity * dt - 0.5 * g * dt * dt + state.rotation.rotate(&delta.alpha),
        velocity: state.velocity - g * dt + state.rotation.rotate(&delta.beta),
        rotation: &state.rotation * &delta.gamma,
        timestamp: state.timestamp + dt,
    }
}

/// Camera-frame initial guess for frame `k`.
///
/// `rel_imu` maps body `k−1` coordinates into body `k` (`T^{k−1}_k` in the
/// `k ← k−1` direction); `prev_cam_pose` is camera-from-world at `k−1`.
/// Returns `T^{k−1}_k · T_{k−1}` after moving the motion into the camera frame.
pub fn initial_guess_camera(rel_imu: &Pose, prev_cam_pose: &Pose, ext: &Extrinsics, mode: ExtrinsicMode) -> Pose {
    let rel_cam = match mode {
        ExtrinsicMode::Similarity => ext.cam_from_imu() * &(rel_imu * ext.imu_from_cam()),
        ExtrinsicMode::Literal => ext.cam_from_imu() * rel_imu,
    };
    rel_cam * *prev_cam_pose
}

/// IMU-from-world pose implied by a tracked camera-from-world pose.
pub fn imu_pose_from_camera(cam_pose: &Pose, ext: &Extrinsics) -> Pose {
    ext.imu_from_cam() * cam_pose
}

/// Reset the navigation state from two consecutive tracked camera poses
/// (camera-from-world). Position and rotation come from frame `k`; velocity is
/// the plain finite difference of the IMU positions over `frame_dt`.
pub fn update_from_tracking(
    tracked_cam_pose_prev: &Pose,
    tracked_cam_pose_curr: &Pose,
    ext: &Extrinsics,
    frame_dt: f64,
) -> Result<NavState> {
    if !(frame_dt > 0.0) {
        return Err(Error::invalid(format!("frame interval must be positive, got {frame_dt}")));
    }
    let world_from_imu_prev = imu_pose_from_camera(tracked_cam_pose_prev, ext).inverse();
    let world_from_imu_curr = imu_pose_from_camera(tracked_cam_pose_curr, ext).inverse();
    Ok(NavState {
        position: world_from_imu_curr.translation,
        velocity: (world_from_imu_curr.translation - world_from_imu_prev.translation) / frame_dt,
        rotation: world_from_imu_curr.rotation,
        timestamp: 0.0,
    })
}

/// The sequential part of the IMU front end: the navigation state plus the
/// delta accumulated since the last tracking reset.
#[derive(Clone, Debug, Default)]
pub struct ImuFrontEnd {
    pub state: NavState,
    pub pending: PreintegrationDelta,
}

impl ImuFrontEnd {
    pub fn new(state: NavState) -> Self {
        Self {
            state,
            pending: PreintegrationDelta::identity(),
        }
    }

    /// Integrate one inter-frame window into the pending delta.
    pub fn accumulate(&mut self, samples: &[ImuSample], t_start: f64, t_end: f64, bias: &ImuBias) -> Result<()> {
        let delta = preintegrate(samples, t_start, t_end, bias)?;
        self.pending = self.pending.append(&delta);
        Ok(())
    }

    /// Body `k−1 ← k` relative motion predicted from the pending delta.
    pub fn predict(&self, gravity: &GravityModel) -> Pose {
        predict_relative_pose(&self.pending, &self.state, gravity)
    }

    /// Replace the state from tracking and clear the pending delta.
    pub fn reset(&mut self, prev: &Pose, curr: &Pose, ext: &Extrinsics, frame_dt: f64, timestamp: f64) -> Result<()> {
        let mut state = update_from_tracking(prev, curr, ext, frame_dt)?;
        state.timestamp = timestamp;
        self.state = state;
        self.pending = PreintegrationDelta::identity();
        Ok(())
    }
}
