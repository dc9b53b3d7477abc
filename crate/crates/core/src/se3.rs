//! Rotations, rigid transforms and the handful of Lie-group helpers the rest
//! of the pipeline needs.
//!
//! Quaternions are always laid out vector-first, `[qx, qy, qz, qw]`, both in
//! memory and at every text boundary (TUM trajectories, calibration files).

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, SymmetricEigen, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat4 = Matrix4<f64>;

/// Compositions between forced renormalizations.
const RENORM_INTERVAL: u32 = 100;
/// Unit-norm drift that triggers an early renormalization.
const RENORM_TOLERANCE: f64 = 1e-10;
const SMALL_ANGLE: f64 = 1e-8;

/// A 3D rotation stored as a unit quaternion.
///
/// Products are renormalized every [`RENORM_INTERVAL`] compositions, or
/// sooner when the quaternion norm drifts by more than `1e-10`.
#[derive(Clone, Copy, Debug)]
pub struct Rotation {
    q: UnitQuaternion<f64>,
    compositions: u32,
}

impl PartialEq for Rotation {
    fn eq(&self, other: &Self) -> bool {
        self.q == other.q
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self::from_unit(UnitQuaternion::identity())
    }

    fn from_unit(q: UnitQuaternion<f64>) -> Self {
        Self { q, compositions: 0 }
    }

    /// Build from `[qx, qy, qz, qw]`; the input is normalized.
    pub fn from_xyzw(xyzw: [f64; 4]) -> Result<Self> {
        if xyzw.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite quaternion"));
        }
        let q = Quaternion::new(xyzw[3], xyzw[0], xyzw[1], xyzw[2]);
        if q.norm() < 1e-12 {
            return Err(Error::invalid("zero quaternion"));
        }
        Ok(Self::from_unit(UnitQuaternion::from_quaternion(q)))
    }

    /// `[qx, qy, qz, qw]` with `qw >= 0`.
    pub fn to_xyzw(&self) -> [f64; 4] {
        let c = self.q.coords;
        let s = if c[3] < 0.0 { -1.0 } else { 1.0 };
        [s * c[0], s * c[1], s * c[2], s * c[3]]
    }

    /// Build from a 3×3 matrix that is orthonormal with determinant +1.
    pub fn from_matrix(m: &Mat3) -> Result<Self> {
        if m.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("non-finite rotation matrix"));
        }
        let err = (m.transpose() * m - Mat3::identity()).abs().max();
        if err > 1e-6 || (m.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("matrix is not a proper rotation"));
        }
        let r = Rotation3::from_matrix_unchecked(*m);
        Ok(Self::from_unit(UnitQuaternion::from_rotation_matrix(&r)))
    }

    pub fn matrix(&self) -> Mat3 {
        self.q.to_rotation_matrix().into_inner()
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.q
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.q.transform_vector(v)
    }

    pub fn inverse(&self) -> Self {
        Self {
            q: self.q.inverse(),
            compositions: self.compositions,
        }
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    /// Exponential map from an axis-angle vector. Below `1e-8` rad a
    /// second-order expansion is used.
    pub fn exp(omega: &Vec3) -> Self {
        let theta = omega.norm();
        let (s, w) = if theta < SMALL_ANGLE {
            let t2 = theta * theta;
            (0.5 - t2 / 48.0, 1.0 - t2 / 8.0)
        } else {
            let half = 0.5 * theta;
            (half.sin() / theta, half.cos())
        };
        let q = Quaternion::new(w, s * omega.x, s * omega.y, s * omega.z);
        Self::from_unit(UnitQuaternion::new_normalize(q))
    }

    /// Logarithm map onto the ball `|ω| ≤ π`. At exactly π the representative
    /// whose first nonzero component is positive is returned.
    pub fn log(&self) -> Vec3 {
        let c = self.q.coords;
        let (mut v, mut w) = (Vec3::new(c[0], c[1], c[2]), c[3]);
        if w < 0.0 {
            v = -v;
            w = -w;
        }
        let n = v.norm();
        if n < SMALL_ANGLE {
            // θ/sin(θ/2) ≈ 2 (1 + θ²/24), expressed through v and w.
            return v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w));
        }
        let theta = 2.0 * n.atan2(w);
        let mut out = v * (theta / n);
        if w < 1e-12 {
            if let Some(first) = out.iter().copied().find(|c| c.abs() > 1e-12) {
                if first < 0.0 {
                    out = -out;
                }
            }
            out *= PI / out.norm();
        }
        out
    }

    /// Orthonormality defect `max |RᵀR − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let m = self.matrix();
        (m.transpose() * m - Mat3::identity()).abs().max()
    }

    fn compose(&self, rhs: &Self) -> Self {
        let raw = self.q.quaternion() * rhs.q.quaternion();
        let compositions = self.compositions.max(rhs.compositions) + 1;
        if compositions >= RENORM_INTERVAL || (raw.norm_squared() - 1.0).abs() > RENORM_TOLERANCE {
            Self::from_unit(UnitQuaternion::new_normalize(raw))
        } else {
            Self {
                q: UnitQuaternion::new_unchecked(raw),
                compositions,
            }
        }
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        self.compose(rhs)
    }
}

/// `so3_exp` with input validation.
pub fn so3_exp(omega: &Vec3) -> Result<Rotation> {
    if omega.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("non-finite axis-angle vector"));
    }
    Ok(Rotation::exp(omega))
}

pub fn so3_log(r: &Rotation) -> Vec3 {
    r.log()
}

/// `⌊ω⌋×`, so that `skew(w) * v == w.cross(&v)`.
#[rustfmt::skip]
pub fn skew(w: &Vec3) -> Mat3 {
    Mat3::new(
        0.0, -w.z, w.y,
        w.z, 0.0, -w.x,
        -w.y, w.x, 0.0,
    )
}

/// Quaternion-rate matrix `Ω(ω) = [[-⌊ω⌋×, ω], [-ωᵀ, 0]]` acting on
/// vector-first quaternions: `q̇ = ½ Ω(ω) q`.
pub fn omega_matrix(w: &Vec3) -> Mat4 {
    let mut m = Mat4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(w)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(w);
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-w.transpose()));
    m
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn from_rotation(r: Rotation) -> Self {
        Self::new(r, Vec3::zeros())
    }

    /// Parse the 7-value layout `tx ty tz qx qy qz qw`.
    pub fn from_tum(values: &[f64]) -> Result<Self> {
        if values.len() != 7 {
            return Err(Error::invalid(format!(
                "pose needs 7 values (tx ty tz qx qy qz qw), got {}",
                values.len()
            )));
        }
        let r = Rotation::from_xyzw([values[3], values[4], values[5], values[6]])?;
        Ok(Self::new(r, Vec3::new(values[0], values[1], values[2])))
    }

    pub fn to_tum(&self) -> [f64; 7] {
        let q = self.rotation.to_xyzw();
        let t = &self.translation;
        [t.x, t.y, t.z, q[0], q[1], q[2], q[3]]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: &self.rotation * &other.rotation,
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r = self.rotation.inverse();
        Pose {
            translation: -r.rotate(&self.translation),
            rotation: r,
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn matrix(&self) -> Mat4 {
        let mut m = Mat4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Mat4) -> Result<Self> {
        let r = Rotation::from_matrix(&m.fixed_view::<3, 3>(0, 0).into_owned())?;
        Ok(Self::new(r, m.fixed_view::<3, 1>(0, 3).into_owned()))
    }

    /// Exponential of a twist `(ρ, φ)` using the left Jacobian of SO(3).
    pub fn exp(rho: &Vec3, phi: &Vec3) -> Pose {
        let theta = phi.norm();
        let k = skew(phi);
        let v = if theta < 1e-6 {
            Mat3::identity() + 0.5 * k + k * k / 6.0
        } else {
            let t2 = theta * theta;
            Mat3::identity()
                + (1.0 - theta.cos()) / t2 * k
                + (theta - theta.sin()) / (t2 * theta) * k * k
        };
        Pose::new(Rotation::exp(phi), v * rho)
    }

    /// Distance-like pair `(|Δt|, angle)` between two poses.
    pub fn delta(&self, other: &Pose) -> (f64, f64) {
        let rel = self.inverse().compose(other);
        (rel.translation.norm(), rel.rotation.angle())
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(a: &Pose) -> Pose {
    a.inverse()
}

pub fn transform_point(a: &Pose, p: &Vec3) -> Vec3 {
    a.transform_point(p)
}

/// Check that `m` is a covariance: symmetric within `1e-9` and with smallest
/// eigenvalue `>= -1e-12`.
pub fn check_covariance(m: &Mat3) -> Result<()> {
    if m.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("non-finite covariance"));
    }
    if (m - m.transpose()).abs().max() > 1e-9 {
        return Err(Error::invalid("covariance is not symmetric"));
    }
    let eig = SymmetricEigen::new(*m);
    if eig.eigenvalues.min() < -1e-12 {
        return Err(Error::invalid("covariance is not positive semi-definite"));
    }
    Ok(())
}

/// `R Σ Rᵀ` for the rotation part of `t`; translation has no effect.
pub fn transport_covariance(t: &Pose, sigma: &Mat3) -> Result<Mat3> {
    check_covariance(sigma)?;
    Ok(rotate_covariance(&t.rotation.matrix(), sigma))
}

/// Unchecked `R Σ Rᵀ`, symmetrized.
pub fn rotate_covariance(r: &Mat3, sigma: &Mat3) -> Mat3 {
    let out = r * sigma * r.transpose();
    0.5 * (out + out.transpose())
}
