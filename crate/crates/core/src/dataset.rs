//! RGB-D + IMU sequence directories.
//!
//! Layout:
//!
//! ```text
//! root/
//!   rgb/<timestamp>.png      8-bit RGB
//!   depth/<timestamp>.png    16-bit, raw units × depth_scale = meters
//!   imu.csv                  timestamp,ax,ay,az,gx,gy,gz
//!   calib.txt                key = value
//!   groundtruth.txt          optional, TUM world-from-camera poses
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::imu::{window_samples, Extrinsics, ImuBias, ImuSample};
use crate::metrics::Trajectory;
use crate::raster::{load_depth_png, load_rgb_png, CameraIntrinsics, Image};
use crate::se3::{Pose, Vec3};

/// RGB and depth images are paired when their timestamps differ by at most this.
pub const ASSOCIATION_TOLERANCE: f64 = 0.01;
/// IMU data must start at least this long before the first frame.
pub const IMU_PREROLL: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub timestamp: f64,
    pub rgb: PathBuf,
    pub depth: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: Extrinsics,
    pub bias: ImuBias,
    /// Meters per raw depth unit.
    pub depth_scale: f64,
    /// Added to IMU timestamps to bring them onto the camera clock.
    pub time_offset: f64,
    /// IMU-frame velocity at the first frame, when known.
    pub initial_velocity: Option<Vec3>,
    /// IMU-frame gravity reaction at the first frame, when known.
    pub initial_gravity: Option<Vec3>,
}

impl Calibration {
    pub fn parse(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&[
            "fx",
            "fy",
            "cx",
            "cy",
            "width",
            "height",
            "depth_scale",
            "imu_to_camera",
            "accel_bias",
            "gyro_bias",
            "time_offset",
            "initial_velocity",
            "initial_gravity",
        ])?;
        let intrinsics = CameraIntrinsics {
            fx: kv.require("fx")?,
            fy: kv.require("fy")?,
            cx: kv.require("cx")?,
            cy: kv.require("cy")?,
            width: kv.require("width")?,
            height: kv.require("height")?,
        };
        intrinsics.validate()?;
        let depth_scale = kv.value("depth_scale")?.unwrap_or(0.001);
        if !(depth_scale > 0.0) {
            return Err(Error::invalid("depth_scale must be positive"));
        }
        let bias = ImuBias::new(
            kv.vec3("accel_bias")?.unwrap_or_else(Vec3::zeros),
            kv.vec3("gyro_bias")?.unwrap_or_else(Vec3::zeros),
        )?;
        Ok(Self {
            intrinsics,
            extrinsics: Extrinsics::new(kv.pose("imu_to_camera")?.unwrap_or_default()),
            bias,
            depth_scale,
            time_offset: kv.value("time_offset")?.unwrap_or(0.0),
            initial_velocity: kv.vec3("initial_velocity")?,
            initial_gravity: kv.vec3("initial_gravity")?,
        })
    }

    pub fn to_text(&self) -> String {
        let k = &self.intrinsics;
        let mut out = String::new();
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
        writeln!(out, "fx = {}\nfy = {}\ncx = {}\ncy = {}", k.fx, k.fy, k.cx, k.cy).unwrap();
        writeln!(out, "width = {}\nheight = {}", k.width, k.height).unwrap();
        writeln!(out, "depth_scale = {}", self.depth_scale).unwrap();
        writeln!(out, "imu_to_camera = {}", fmt(&self.extrinsics.cam_from_imu().to_tum())).unwrap();
        writeln!(out, "accel_bias = {}", fmt(self.bias.accel.as_slice())).unwrap();
        writeln!(out, "gyro_bias = {}", fmt(self.bias.gyro.as_slice())).unwrap();
        writeln!(out, "time_offset = {}", self.time_offset).unwrap();
        if let Some(v) = self.initial_velocity {
            writeln!(out, "initial_velocity = {}", fmt(v.as_slice())).unwrap();
        }
        if let Some(g) = self.initial_gravity {
            writeln!(out, "initial_gravity = {}", fmt(g.as_slice())).unwrap();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceManifest {
    pub root: PathBuf,
    pub frames: Vec<FrameRecord>,
    pub imu: Vec<ImuSample>,
    pub calibration: Calibration,
    pub groundtruth: Option<Trajectory>,
}

impl SequenceManifest {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Load frame `k` as (RGB in `[0, 1]`, depth in meters).
    pub fn load_frame(&self, k: usize) -> Result<(Image, Image)> {
        let f = self
            .frames
            .get(k)
            .ok_or_else(|| Error::invalid(format!("frame {k} out of range")))?;
        let rgb = load_rgb_png(&f.rgb)?;
        let depth = load_depth_png(&f.depth, self.calibration.depth_scale)?;
        let k = &self.calibration.intrinsics;
        let fits = |img: &Image| img.width == k.width && img.height == k.height;
        if !fits(&rgb) || !fits(&depth) {
            return Err(Error::invalid(format!("{} does not match the calibrated image size", f.rgb.display())));
        }
        Ok((rgb, depth))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ImuRow {
    timestamp: f64,
    ax: f64,
    ay: f64,
    az: f64,
    gx: f64,
    gy: f64,
    gz: f64,
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<ImuRow>().enumerate() {
        let r = row.map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 2), e.to_string()))?;
        let s = ImuSample::new(r.timestamp, Vec3::new(r.ax, r.ay, r.az), Vec3::new(r.gx, r.gy, r.gz));
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    for s in samples {
        writer
            .serialize(ImuRow {
                timestamp: s.timestamp,
                ax: s.accel.x,
                ay: s.accel.y,
                az: s.accel.z,
                gx: s.gyro.x,
                gy: s.gyro.y,
                gz: s.gyro.z,
            })
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Canonical file stem for a timestamp.
pub fn timestamp_name(t: f64) -> String {
    format!("{t:.6}")
}

fn list_timestamped_pngs(dir: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let t: f64 = stem
            .parse()
            .map_err(|_| Error::parse(path.display().to_string(), "file name is not a timestamp"))?;
        out.push((t, path));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in out.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::Ordering(format!("duplicate timestamp {} in {}", w[0].0, dir.display())));
        }
    }
    Ok(out)
}

/// Read and validate a sequence directory.
pub fn load_sequence(root: &Path) -> Result<SequenceManifest> {
    let required = [root.join("rgb"), root.join("depth"), root.join("imu.csv"), root.join("calib.txt")];
    let missing: Vec<PathBuf> = required.iter().filter(|p| !p.exists()).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingAsset(missing));
    }
    let calibration = Calibration::parse(&KeyValues::load(&root.join("calib.txt"))?)?;

    let rgb = list_timestamped_pngs(&root.join("rgb"))?;
    let depth = list_timestamped_pngs(&root.join("depth"))?;
    let mut frames = Vec::new();
    for (t, rgb_path) in rgb {
        let nearest = depth
            .iter()
            .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()))
            .filter(|d| (d.0 - t).abs() <= ASSOCIATION_TOLERANCE);
        if let Some((_, depth_path)) = nearest {
            frames.push(FrameRecord {
                timestamp: t,
                rgb: rgb_path,
                depth: depth_path.clone(),
            });
        } else {
            log::warn!("no depth image within {ASSOCIATION_TOLERANCE} s of rgb frame {t:.6}; skipped");
        }
    }
    if frames.is_empty() {
        return Err(Error::invalid(format!("{} contains no associated RGB-D frames", root.display())));
    }

    let mut imu = read_imu_csv(&root.join("imu.csv"))?;
    for s in &mut imu {
        s.timestamp += calibration.time_offset;
    }
    for (i, w) in imu.windows(2).enumerate() {
        if !(w[1].timestamp > w[0].timestamp) {
            return Err(Error::Ordering(format!(
                "imu.csv row {} (t = {}) does not follow t = {}",
                i + 3,
                w[1].timestamp,
                w[0].timestamp
            )));
        }
    }
    let (first, last) = (frames[0].timestamp, frames[frames.len() - 1].timestamp);
    let covered = match (imu.first(), imu.last()) {
        (Some(a), Some(b)) => a.timestamp <= first - IMU_PREROLL + 1e-6 && b.timestamp >= last - 1e-6,
        _ => false,
    };
    if !covered {
        return Err(Error::Coverage {
            start: first - IMU_PREROLL,
            end: last,
        });
    }

    let gt_path = root.join("groundtruth.txt");
    let groundtruth = if gt_path.exists() {
        Some(Trajectory::load_tum(&gt_path)?)
    } else {
        None
    };
    Ok(SequenceManifest {
        root: root.to_path_buf(),
        frames,
        imu,
        calibration,
        groundtruth,
    })
}

/// Frame `k` and the IMU samples spanning `[t_{k−1}, t_k]` with interpolated
/// boundary samples.
pub fn frame_window(manifest: &SequenceManifest, k: usize) -> Result<(FrameRecord, Vec<ImuSample>)> {
    if k == 0 || k >= manifest.frames.len() {
        return Err(Error::invalid(format!(
            "frame window needs 1 <= k < {}, got {k}",
            manifest.frames.len()
        )));
    }
    let (t0, t1) = (manifest.frames[k - 1].timestamp, manifest.frames[k].timestamp);
    let samples = window_samples(&manifest.imu, t0, t1)?;
    Ok((manifest.frames[k].clone(), samples))
}

/// Write a world-from-camera trajectory as `groundtruth.txt`.
pub fn write_groundtruth(root: &Path, poses: &[(f64, Pose)]) -> Result<()> {
    Trajectory::new(poses.to_vec())?.save_tum(&root.join("groundtruth.txt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{save_depth_png, save_rgb_png};

    fn calibration() -> Calibration {
        Calibration {
            intrinsics: CameraIntrinsics {
                fx: 20.0,
                fy: 20.0,
                cx: 3.5,
                cy: 2.5,
                width: 8,
                height: 6,
            },
            extrinsics: Extrinsics::identity(),
            bias: ImuBias::zero(),
            depth_scale: 0.001,
            time_offset: 0.0,
            initial_velocity: None,
            initial_gravity: None,
        }
    }

    fn write_fixture(root: &Path, frames: usize, imu_rate: f64) {
        std::fs::create_dir_all(root.join("rgb")).unwrap();
        std::fs::create_dir_all(root.join("depth")).unwrap();
        std::fs::write(root.join("calib.txt"), calibration().to_text()).unwrap();
        for k in 0..frames {
            let t = 1.0 + k as f64 / 30.0;
            let name = format!("{}.png", timestamp_name(t));
            save_rgb_png(&root.join("rgb").join(&name), &Image::filled(8, 6, 3, 0.5)).unwrap();
            save_depth_png(&root.join("depth").join(&name), &Image::filled(8, 6, 1, 1.234), 0.001).unwrap();
        }
        let end = 1.0 + (frames - 1) as f64 / 30.0;
        let n = ((end - 0.8) * imu_rate).ceil() as usize + 1;
        let imu: Vec<ImuSample> = (0..n)
            .map(|i| ImuSample::new(0.8 + i as f64 / imu_rate, Vec3::new(0.0, 0.0, 9.81), Vec3::zeros()))
            .collect();
        write_imu_csv(&root.join("imu.csv"), &imu).unwrap();
    }

    #[test]
    fn loads_well_formed_directory() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 5, 300.0);
        let m = load_sequence(dir.path()).unwrap();
        assert_eq!(m.len(), 5);
        assert!(m.imu.len() >= 10 * m.len());
        let (rgb, depth) = m.load_frame(2).unwrap();
        assert_eq!(rgb.channels, 3);
        assert!((depth.get(0, 0, 0) - 1.234).abs() < 1e-9);
        assert!(m.groundtruth.is_none());
    }

    #[test]
    fn missing_imu_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 3, 300.0);
        std::fs::remove_file(dir.path().join("imu.csv")).unwrap();
        match load_sequence(dir.path()) {
            Err(Error::MissingAsset(paths)) => {
                assert_eq!(paths.len(), 1);
                assert!(paths[0].ends_with("imu.csv"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(load_sequence(&dir.path().join("nope")), Err(Error::MissingAsset(p)) if p.len() == 4));
    }

    #[test]
    fn shuffled_imu_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 3, 300.0);
        let path = dir.path().join("imu.csv");
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(5, 9);
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(Error::Ordering(_))));
    }

    #[test]
    fn window_edges_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 4, 300.0);
        let m = load_sequence(dir.path()).unwrap();
        let (rec, samples) = frame_window(&m, 1).unwrap();
        assert!((10..=12).contains(&samples.len()), "{}", samples.len());
        assert_eq!(samples.first().unwrap().timestamp, m.frames[0].timestamp);
        assert_eq!(samples.last().unwrap().timestamp, rec.timestamp);
        assert!(frame_window(&m, 0).is_err());
        assert!(frame_window(&m, 4).is_err());
    }

    #[test]
    fn short_imu_stream_is_a_coverage_error() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 3, 300.0);
        let imu = read_imu_csv(&dir.path().join("imu.csv")).unwrap();
        write_imu_csv(&dir.path().join("imu.csv"), &imu[..20]).unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(Error::Coverage { .. })));
    }

    #[test]
    fn calibration_roundtrip() {
        let mut c = calibration();
        c.initial_velocity = Some(Vec3::new(1.0, 0.0, 0.0));
        let back = Calibration::parse(&KeyValues::parse(&c.to_text(), "mem").unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(Calibration::parse(&KeyValues::parse("fx = 1\n", "mem").unwrap()).is_err());
    }
}
