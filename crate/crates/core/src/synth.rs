//! Synthetic RGB-D + IMU sequences with analytically exact inertial data.
//!
//! Scenes are axis-aligned boxes and infinite planes with checkerboard
//! textures. The IMU follows `p(t) = c₀ + c₁τ + c₂τ² + c₃τ³ + A·sin(fτ + φ)`
//! per world axis (`τ = t − start_time`) and `R(t) = R₀·Exp(τ ω)` with a
//! constant body rate `ω`, so specific force and angular rate are closed-form.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KeyValues;
use crate::dataset::{load_sequence, timestamp_name, write_imu_csv, Calibration, SequenceManifest};
use crate::error::{Error, Result};
use crate::gicp::MAX_DEPTH;
use crate::imu::{Extrinsics, GravityModel, ImuBias, ImuSample};
use crate::metrics::Trajectory;
use crate::raster::{save_depth_png, save_rgb_png, CameraIntrinsics, Image};
use crate::se3::{Pose, Rotation, Vec3};

/// One world axis of the IMU trajectory.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AxisMotion {
    pub poly: [f64; 4],
    pub amplitude: f64,
    /// Angular frequency, rad/s.
    pub frequency: f64,
    pub phase: f64,
}

impl AxisMotion {
    pub fn value(&self, tau: f64) -> f64 {
        let [c0, c1, c2, c3] = self.poly;
        c0 + tau * (c1 + tau * (c2 + tau * c3)) + self.amplitude * (self.frequency * tau + self.phase).sin()
    }

    pub fn rate(&self, tau: f64) -> f64 {
        let [_, c1, c2, c3] = self.poly;
        c1 + tau * (2.0 * c2 + 3.0 * c3 * tau)
            + self.amplitude * self.frequency * (self.frequency * tau + self.phase).cos()
    }

    pub fn accel(&self, tau: f64) -> f64 {
        let [_, _, c2, c3] = self.poly;
        2.0 * c2 + 6.0 * c3 * tau
            - self.amplitude * self.frequency * self.frequency * (self.frequency * tau + self.phase).sin()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Texture {
    pub colors: [Vec3; 2],
    /// Checker cell size in meters.
    pub cell: f64,
}

impl Texture {
    fn at(&self, p: &Vec3) -> Vec3 {
        let parity = (p / self.cell).map(f64::floor).sum().rem_euclid(2.0);
        self.colors[(parity >= 1.0) as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Box { min: Vec3, max: Vec3, texture: Texture },
    /// Points `x` with `normal · x = offset`.
    Plane { normal: Vec3, offset: f64, texture: Texture },
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoiseModel {
    pub accel_sigma: f64,
    pub gyro_sigma: f64,
    pub accel_bias: Vec3,
    pub gyro_bias: Vec3,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub primitives: Vec<Primitive>,
    pub position: [AxisMotion; 3],
    /// World-from-IMU rotation at `start_time`.
    pub initial_rotation: Rotation,
    /// Constant body-frame angular rate, rad/s.
    pub angular_rate: Vec3,
    pub frame_rate: f64,
    pub imu_rate: f64,
    pub frames: usize,
    pub start_time: f64,
    /// IMU data recorded before the first frame, seconds.
    pub imu_preroll: f64,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: Extrinsics,
    pub depth_scale: f64,
    /// Color rays per pixel along each axis.
    pub supersample: usize,
    pub noise: NoiseModel,
    pub gravity: GravityModel,
}

struct Hit {
    depth: f64,
    color: Vec3,
}

impl SyntheticSceneSpec {
    /// A textured box room, useful as a starting point in tests.
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        Self {
            primitives: Vec::new(),
            position: [AxisMotion::default(); 3],
            initial_rotation: Rotation::identity(),
            angular_rate: Vec3::zeros(),
            frame_rate: 10.0,
            imu_rate: 200.0,
            frames: 10,
            start_time: 1.0,
            imu_preroll: 0.2,
            intrinsics,
            extrinsics: Extrinsics::identity(),
            depth_scale: 0.001,
            supersample: 1,
            noise: NoiseModel::default(),
            gravity: GravityModel::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if !(self.frame_rate > 0.0) || !self.frame_rate.is_finite() {
            return bad("frame_rate must be positive");
        }
        if !(self.imu_rate >= 10.0 * self.frame_rate) || !self.imu_rate.is_finite() {
            return bad("imu_rate must be at least 10x frame_rate");
        }
        if self.frames == 0 {
            return bad("frames must be at least 1");
        }
        if !self.start_time.is_finite() || !(self.imu_preroll >= 0.1) {
            return bad("start_time must be finite and imu_preroll at least 0.1 s");
        }
        for a in &self.position {
            let finite = a.poly.iter().chain([a.amplitude, a.frequency, a.phase].iter()).all(|v| v.is_finite());
            if !finite || a.frequency < 0.0 {
                return bad("trajectory coefficients must be finite with non-negative frequency");
            }
        }
        if !self.angular_rate.iter().all(|v| v.is_finite()) {
            return bad("rotation rate must be finite");
        }
        if self.intrinsics.validate().is_err() || !(self.depth_scale > 0.0) || self.supersample == 0 {
            return bad("camera parameters are invalid");
        }
        if self.primitives.is_empty() {
            return bad("scene has no primitives");
        }
        for p in &self.primitives {
            let ok = match p {
                Primitive::Box { min, max, texture } => (0..3).all(|i| min[i] < max[i]) && texture.cell > 0.0,
                Primitive::Plane { normal, texture, .. } => normal.norm() > 1e-9 && texture.cell > 0.0,
            };
            if !ok {
                return bad("degenerate primitive");
            }
        }
        let n = &self.noise;
        if !(n.accel_sigma >= 0.0 && n.gyro_sigma >= 0.0) || ImuBias::new(n.accel_bias, n.gyro_bias).is_err() {
            return bad("noise sigmas must be non-negative and biases within sensor bounds");
        }
        Ok(())
    }

    /// Frame timestamps, rounded to the precision used in file names.
    pub fn frame_times(&self) -> Vec<f64> {
        (0..self.frames)
            .map(|k| {
                let t = self.start_time + k as f64 / self.frame_rate;
                timestamp_name(t).parse().expect("formatted float parses")
            })
            .collect()
    }

    pub fn position(&self, t: f64) -> Vec3 {
        let tau = t - self.start_time;
        Vec3::from_fn(|i, _| self.position[i].value(tau))
    }

    pub fn velocity(&self, t: f64) -> Vec3 {
        let tau = t - self.start_time;
        Vec3::from_fn(|i, _| self.position[i].rate(tau))
    }

    pub fn acceleration(&self, t: f64) -> Vec3 {
        let tau = t - self.start_time;
        Vec3::from_fn(|i, _| self.position[i].accel(tau))
    }

    /// Body-to-world rotation.
    pub fn rotation(&self, t: f64) -> Rotation {
        &self.initial_rotation * &Rotation::exp(&(self.angular_rate * (t - self.start_time)))
    }

    pub fn world_from_imu(&self, t: f64) -> Pose {
        Pose::new(self.rotation(t), self.position(t))
    }

    /// Camera-from-world pose at `t`.
    pub fn camera_pose(&self, t: f64) -> Pose {
        self.extrinsics.cam_from_imu() * &self.world_from_imu(t).inverse()
    }

    /// Noise-free, bias-free IMU reading.
    pub fn ideal_imu(&self, t: f64) -> ImuSample {
        let r = self.rotation(t);
        let accel = r.inverse().rotate(&(self.acceleration(t) + self.gravity.gravity_world));
        ImuSample::new(t, accel, self.angular_rate)
    }

    pub fn imu_stream(&self) -> Vec<ImuSample> {
        let times = self.frame_times();
        let begin = times[0] - self.imu_preroll;
        let end = times[times.len() - 1] + 0.05;
        let n = ((end - begin) * self.imu_rate).ceil() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise.seed);
        let accel_noise = Normal::new(0.0, self.noise.accel_sigma).expect("validated sigma");
        let gyro_noise = Normal::new(0.0, self.noise.gyro_sigma).expect("validated sigma");
        (0..=n)
            .map(|i| {
                let mut s = self.ideal_imu(begin + i as f64 / self.imu_rate);
                let mut draw = |d: &Normal<f64>| Vec3::from_fn(|_, _| d.sample(&mut rng));
                s.accel += self.noise.accel_bias + draw(&accel_noise);
                s.gyro += self.noise.gyro_bias + draw(&gyro_noise);
                s
            })
            .collect()
    }

    fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        let mut best: Option<(f64, Vec3, &Texture, f64)> = None;
        for prim in &self.primitives {
            let hit = match prim {
                Primitive::Box { min, max, texture } => ray_box(origin, dir, min, max).map(|(s, axis, sign)| {
                    let n = Vec3::ith(axis, sign);
                    let shade = 1.0 - 0.07 * axis as f64 - if sign < 0.0 { 0.04 } else { 0.0 };
                    (s, n, texture, shade)
                }),
                Primitive::Plane { normal, offset, texture } => {
                    let n = normal.normalize();
                    let denom = n.dot(dir);
                    let s = (offset / normal.norm() - n.dot(origin)) / denom;
                    (denom.abs() > 1e-12 && s > 1e-9).then_some((s, -n * denom.signum(), texture, 1.0))
                }
            };
            if let Some(h) = hit {
                if best.as_ref().is_none_or(|b| h.0 < b.0) {
                    best = Some(h);
                }
            }
        }
        best.map(|(s, n, texture, shade)| {
            let p = origin + dir * s - n * 1e-6;
            Hit {
                depth: s,
                color: texture.at(&p) * shade,
            }
        })
    }

    /// Render color and metric depth (camera z; 0 where invalid) at `t`.
    pub fn render_frame(&self, t: f64) -> (Image, Image) {
        let k = &self.intrinsics;
        let world_from_cam = self.camera_pose(t).inverse();
        let r = world_from_cam.rotation.matrix();
        let origin = world_from_cam.translation;
        let ss = self.supersample;
        let mut rgb = Image::new(k.width, k.height, 3);
        let mut depth = Image::new(k.width, k.height, 1);
        let ray = |u: f64, v: f64| r * Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        for v in 0..k.height {
            for u in 0..k.width {
                if let Some(h) = self.cast(&origin, &ray(u as f64, v as f64)) {
                    if h.depth <= MAX_DEPTH {
                        depth.set(u, v, 0, h.depth);
                    }
                }
                let mut c = Vec3::zeros();
                for i in 0..ss {
                    for j in 0..ss {
                        let du = (j as f64 + 0.5) / ss as f64 - 0.5;
                        let dv = (i as f64 + 0.5) / ss as f64 - 0.5;
                        if let Some(h) = self.cast(&origin, &ray(u as f64 + du, v as f64 + dv)) {
                            c += h.color;
                        }
                    }
                }
                c /= (ss * ss) as f64;
                for ch in 0..3 {
                    rgb.set(u, v, ch, c[ch].clamp(0.0, 1.0));
                }
            }
        }
        (rgb, depth)
    }

    /// World-from-camera ground truth at the frame times.
    pub fn groundtruth(&self) -> Trajectory {
        Trajectory::new(self.frame_times().into_iter().map(|t| (t, self.camera_pose(t).inverse())).collect())
            .expect("frame times increase")
    }

    pub fn calibration(&self) -> Calibration {
        let t0 = self.frame_times()[0];
        let r0 = self.rotation(t0).inverse();
        Calibration {
            intrinsics: self.intrinsics,
            extrinsics: self.extrinsics,
            bias: ImuBias::zero(),
            depth_scale: self.depth_scale,
            time_offset: 0.0,
            initial_velocity: Some(r0.rotate(&self.velocity(t0))),
            initial_gravity: Some(r0.rotate(&self.gravity.gravity_world)),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let kv = KeyValues::load(path)?;
        Self::from_key_values(&kv)
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        Self::from_key_values(&KeyValues::parse(text, source)?)
    }

    fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&[
            "frames",
            "frame_rate",
            "imu_rate",
            "start_time",
            "imu_preroll",
            "width",
            "height",
            "fx",
            "fy",
            "cx",
            "cy",
            "depth_scale",
            "supersample",
            "imu_to_camera",
            "position.",
            "rotation.",
            "noise.",
            "box",
            "box_row",
            "plane",
        ])?;
        let spec_err = |e: Error| Error::InvalidSpec(e.to_string());
        let intrinsics = CameraIntrinsics {
            fx: kv.require("fx").map_err(spec_err)?,
            fy: kv.require("fy").map_err(spec_err)?,
            cx: kv.require("cx").map_err(spec_err)?,
            cy: kv.require("cy").map_err(spec_err)?,
            width: kv.require("width").map_err(spec_err)?,
            height: kv.require("height").map_err(spec_err)?,
        };
        let mut spec = Self::new(intrinsics);
        kv.set("frames", &mut spec.frames)?;
        kv.set("frame_rate", &mut spec.frame_rate)?;
        kv.set("imu_rate", &mut spec.imu_rate)?;
        kv.set("start_time", &mut spec.start_time)?;
        kv.set("imu_preroll", &mut spec.imu_preroll)?;
        kv.set("depth_scale", &mut spec.depth_scale)?;
        kv.set("supersample", &mut spec.supersample)?;
        if let Some(p) = kv.pose("imu_to_camera")? {
            spec.extrinsics = Extrinsics::new(p);
        }
        for (i, axis) in ["x", "y", "z"].iter().enumerate() {
            if let Some(v) = kv.floats(&format!("position.{axis}"), 7)? {
                spec.position[i] = AxisMotion {
                    poly: [v[0], v[1], v[2], v[3]],
                    amplitude: v[4],
                    frequency: v[5],
                    phase: v[6],
                };
            }
        }
        if let Some(q) = kv.floats("rotation.initial", 4)? {
            spec.initial_rotation = Rotation::from_xyzw([q[0], q[1], q[2], q[3]]).map_err(spec_err)?;
        }
        if let Some(w) = kv.vec3("rotation.rate")? {
            spec.angular_rate = w;
        }
        kv.set("noise.accel_sigma", &mut spec.noise.accel_sigma)?;
        kv.set("noise.gyro_sigma", &mut spec.noise.gyro_sigma)?;
        kv.set("noise.seed", &mut spec.noise.seed)?;
        if let Some(b) = kv.vec3("noise.accel_bias")? {
            spec.noise.accel_bias = b;
        }
        if let Some(b) = kv.vec3("noise.gyro_bias")? {
            spec.noise.gyro_bias = b;
        }

        let texture = |v: &[f64]| Texture {
            colors: [Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5])],
            cell: v[6],
        };
        for e in kv.entries() {
            let v = kv.floats_of(e)?;
            let need = |n: usize| {
                if v.len() == n {
                    Ok(())
                } else {
                    Err(Error::parse(kv.location(e), format!("`{}` needs {n} numbers, got {}", e.key, v.len())))
                }
            };
            match e.key.as_str() {
                "box" => {
                    need(13)?;
                    spec.primitives.push(Primitive::Box {
                        min: Vec3::new(v[0], v[1], v[2]),
                        max: Vec3::new(v[3], v[4], v[5]),
                        texture: texture(&v[6..13]),
                    });
                }
                "box_row" => {
                    // count dx dy dz, then a box.
                    need(17)?;
                    let step = Vec3::new(v[1], v[2], v[3]);
                    for i in 0..v[0].max(0.0) as usize {
                        let shift = step * i as f64;
                        spec.primitives.push(Primitive::Box {
                            min: Vec3::new(v[4], v[5], v[6]) + shift,
                            max: Vec3::new(v[7], v[8], v[9]) + shift,
                            texture: texture(&v[10..17]),
                        });
                    }
                }
                "plane" => {
                    need(11)?;
                    spec.primitives.push(Primitive::Plane {
                        normal: Vec3::new(v[0], v[1], v[2]),
                        offset: v[3],
                        texture: texture(&v[4..11]),
                    });
                }
                _ => {}
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Entry distance along `dir`, hit axis and outward normal sign.
fn ray_box(origin: &Vec3, dir: &Vec3, min: &Vec3, max: &Vec3) -> Option<(f64, usize, f64)> {
    let mut near = f64::NEG_INFINITY;
    let mut far = f64::INFINITY;
    let mut axis = 0;
    let mut sign = -1.0;
    for i in 0..3 {
        if dir[i].abs() < 1e-15 {
            if origin[i] < min[i] || origin[i] > max[i] {
                return None;
            }
            continue;
        }
        let (a, b) = ((min[i] - origin[i]) / dir[i], (max[i] - origin[i]) / dir[i]);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        if lo > near {
            near = lo;
            axis = i;
            sign = if dir[i] > 0.0 { -1.0 } else { 1.0 };
        }
        far = far.min(hi);
    }
    (near <= far && near > 1e-9).then_some((near, axis, sign))
}

/// Render every frame, write the sequence directory and load it back.
pub fn synthesize_sequence(spec: &SyntheticSceneSpec, root: &Path) -> Result<SequenceManifest> {
    spec.validate()?;
    std::fs::create_dir_all(root.join("rgb"))?;
    std::fs::create_dir_all(root.join("depth"))?;
    for t in spec.frame_times() {
        let (rgb, depth) = spec.render_frame(t);
        let name = format!("{}.png", timestamp_name(t));
        save_rgb_png(&root.join("rgb").join(&name), &rgb)?;
        save_depth_png(&root.join("depth").join(&name), &depth, spec.depth_scale)?;
    }
    write_imu_csv(&root.join("imu.csv"), &spec.imu_stream())?;
    std::fs::write(root.join("calib.txt"), spec.calibration().to_text())?;
    spec.groundtruth().save_tum(&root.join("groundtruth.txt"))?;
    load_sequence(root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn room(w: usize, h: usize) -> SyntheticSceneSpec {
        let mut spec = SyntheticSceneSpec::new(CameraIntrinsics {
            fx: 20.0,
            fy: 20.0,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
            width: w,
            height: h,
        });
        let tex = Texture {
            colors: [Vec3::new(0.9, 0.2, 0.2), Vec3::new(0.2, 0.2, 0.9)],
            cell: 0.5,
        };
        spec.primitives.push(Primitive::Plane {
            normal: Vec3::new(0.0, 0.0, 1.0),
            offset: 5.0,
            texture: tex,
        });
        spec.primitives.push(Primitive::Box {
            min: Vec3::new(-0.5, -0.5, 2.0),
            max: Vec3::new(0.5, 0.5, 3.0),
            texture: tex,
        });
        spec.frames = 3;
        spec
    }

    #[test]
    fn stationary_reads_gravity() {
        let spec = room(8, 6);
        for s in spec.imu_stream() {
            assert_relative_eq!(s.accel, Vec3::new(0.0, 0.0, 9.81), epsilon = 1e-12);
            assert_eq!(s.gyro, Vec3::zeros());
        }
    }

    #[test]
    fn constant_velocity_reads_gravity() {
        let mut spec = room(8, 6);
        spec.position[0].poly = [0.0, 1.5, 0.0, 0.0];
        spec.position[2].poly = [0.3, -0.2, 0.0, 0.0];
        for s in spec.imu_stream() {
            assert_relative_eq!(s.accel, Vec3::new(0.0, 0.0, 9.81), epsilon = 1e-12);
        }
    }

    #[test]
    fn circle_has_centripetal_acceleration() {
        let mut spec = room(8, 6);
        let w = 2.0 * PI / 10.0;
        spec.position[0] = AxisMotion {
            poly: [0.0; 4],
            amplitude: 2.0,
            frequency: w,
            phase: PI / 2.0,
        };
        spec.position[1] = AxisMotion {
            poly: [0.0; 4],
            amplitude: 2.0,
            frequency: w,
            phase: 0.0,
        };
        let centripetal = 4.0 * PI * PI * 2.0 / 100.0;
        for s in spec.imu_stream() {
            let horizontal = Vec3::new(s.accel.x, s.accel.y, 0.0).norm();
            assert_relative_eq!(horizontal, centripetal, epsilon = 1e-9);
            assert_relative_eq!(s.accel.norm(), (9.81f64.powi(2) + centripetal * centripetal).sqrt(), epsilon = 1e-9);
        }
        assert_relative_eq!(centripetal, 0.7896, epsilon = 1e-4);
    }

    #[test]
    fn depth_is_camera_z() {
        let spec = room(9, 7);
        let (rgb, depth) = spec.render_frame(spec.start_time);
        assert_relative_eq!(depth.get(4, 3, 0), 2.0, epsilon = 1e-12);
        // Off-centre ray through the box front face still reports z, not range.
        assert_relative_eq!(depth.get(6, 3, 0), 2.0, epsilon = 1e-12);
        assert!(rgb.data.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn invalid_specs() {
        let mut spec = room(8, 6);
        spec.imu_rate = 50.0;
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
        let mut spec = room(8, 6);
        spec.position[1].amplitude = f64::NAN;
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
        let mut spec = room(8, 6);
        spec.position[1].frequency = -1.0;
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn roundtrip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = room(8, 6);
        spec.position[0].poly = [0.0, 0.2, 0.0, 0.0];
        let m = synthesize_sequence(&spec, dir.path()).unwrap();
        let times: Vec<f64> = m.frames.iter().map(|f| f.timestamp).collect();
        assert_eq!(times, spec.frame_times());
        for (k, t) in times.iter().enumerate() {
            let (_, depth) = m.load_frame(k).unwrap();
            let (_, exact) = spec.render_frame(*t);
            for (a, b) in depth.data.iter().zip(&exact.data) {
                assert!((a - b).abs() <= 0.0005 + 1e-9);
            }
        }
        assert_eq!(m.groundtruth.unwrap().len(), 3);
        assert_eq!(m.imu.len(), spec.imu_stream().len());
    }

    #[test]
    fn spec_text_format() {
        let text = "frames = 4\nwidth = 8\nheight = 6\nfx = 20\nfy = 20\ncx = 3.5\ncy = 2.5\n\
                    position.x = 0 1 0 0 0.1 2 0\nrotation.rate = 0 0 0.1\n\
                    box_row = 3 1 0 0 0 0 2 0.5 0.5 3 1 1 1 0 0 0 0.25\n\
                    plane = 0 0 1 6 1 1 1 0 0 0 1\n";
        let spec = SyntheticSceneSpec::parse(text, "mem").unwrap();
        assert_eq!(spec.frames, 4);
        assert_eq!(spec.primitives.len(), 4);
        assert_eq!(spec.angular_rate, Vec3::new(0.0, 0.0, 0.1));
        assert!(SyntheticSceneSpec::parse("width = 8\n", "mem").is_err());
        assert!(SyntheticSceneSpec::parse(&format!("{text}bogus = 1\n"), "mem").is_err());
    }
}
