//! Rigid-body math shared by every other module.
//!
//! Conventions: right-handed frames, column vectors, `Pose` is the transform
//! from a parent frame to a child frame (`T_{A->B}`), so `a.compose(&b)`
//! chains `A->B` with `B->C`. Rotation errors are expressed in the world
//! frame (`R_desired * R_currentᵀ`). Angles are radians everywhere inside the
//! crate.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Matrix3, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orthonormality tolerance used when validating rotation matrices.
pub const ORTHONORMAL_TOL: f64 = 1e-9;
/// Quaternions closer than this to unit norm are renormalized silently.
pub const QUAT_SILENT_TOL: f64 = 1e-6;
/// Quaternions further than this from unit norm are rejected.
pub const QUAT_REJECT_TOL: f64 = 1e-3;
/// Above `PI - NEAR_PI` the log map switches to diagonal axis extraction.
const NEAR_PI: f64 = 1e-4;

/// Rigid transform: rotation matrix plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, checking that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Self {
            rotation,
            translation: Vector3::zeros(),
        }
    }

    /// Pure rotation of `angle` radians about `axis` (normalized here).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::from_rotation(rotation_about(axis, angle))
    }

    /// Ingests an interface quaternion `[w, x, y, z]`.
    pub fn from_quaternion(translation: [f64; 3], wxyz: [f64; 4]) -> Result<Self> {
        let q = normalize_quaternion(wxyz)?;
        let rotation = *q.to_rotation_matrix().matrix();
        Self::new(rotation, Vector3::from(translation))
    }

    /// Unit quaternion `[w, x, y, z]` with `w >= 0`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(
            self.rotation,
        ));
        let q = q.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    /// `self` followed by `other`: `T_{A->B} * T_{B->C} = T_{A->C}`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn invert(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Max absolute entry difference over rotation and translation.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let r = (self.rotation - other.rotation).abs().max();
        let t = (self.translation - other.translation).abs().max();
        r.max(t)
    }

    pub fn wire(&self) -> WirePose {
        WirePose::from(self)
    }
}

/// Serialized pose: `translation` in meters, `rotation` as `[w, x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WirePose {
    pub translation: [f64; 3],
    pub rotation: [f64; 4],
}

impl From<&Pose> for WirePose {
    fn from(p: &Pose) -> Self {
        WirePose {
            translation: [p.translation.x, p.translation.y, p.translation.z],
            rotation: p.quaternion_wxyz(),
        }
    }
}

impl From<Pose> for WirePose {
    fn from(p: Pose) -> Self {
        WirePose::from(&p)
    }
}

impl TryFrom<WirePose> for Pose {
    type Error = Error;
    fn try_from(w: WirePose) -> Result<Pose> {
        Pose::from_quaternion(w.translation, w.rotation)
    }
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        WirePose::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let w = WirePose::deserialize(d)?;
        Pose::try_from(w).map_err(serde::de::Error::custom)
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidPose("non-finite rotation".into()));
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if ortho > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(Error::InvalidPose(format!(
            "rotation not orthonormal (deviation {ortho:e}, det {det})"
        )));
    }
    Ok(())
}

/// Renormalizes a `[w, x, y, z]` quaternion, rejecting norms off by more
/// than [`QUAT_REJECT_TOL`].
pub fn normalize_quaternion(wxyz: [f64; 4]) -> Result<UnitQuaternion<f64>> {
    let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > QUAT_REJECT_TOL {
        return Err(Error::InvalidPose(format!("quaternion norm {n} not unit")));
    }
    if (n - 1.0).abs() > QUAT_SILENT_TOL {
        log::warn!("renormalizing quaternion with norm {n}");
    }
    Ok(UnitQuaternion::from_quaternion(q))
}

/// Rodrigues rotation about `axis` (need not be unit length).
pub fn rotation_about(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let n = axis.norm();
    if n == 0.0 || angle == 0.0 {
        return Matrix3::identity();
    }
    let a = axis / n;
    let k = skew(&a);
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee_antisym(r: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)])
}

/// Scalar rotation magnitude in `[0, PI]`.
///
/// Equal to `acos((tr R - 1) / 2)`; evaluated through `atan2` so that small
/// and near-PI angles keep full precision.
pub fn geodesic_angle(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let s = (vee_antisym(r).norm() / 2.0).clamp(0.0, 1.0);
    s.atan2(c).clamp(0.0, PI)
}

/// Axis-angle form of a rotation; angle in `[0, PI]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle {
    pub axis: Unit<Vector3<f64>>,
    pub angle: f64,
}

impl AxisAngle {
    pub fn new(axis: Vector3<f64>, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if !(n > 0.0) || !angle.is_finite() {
            return Err(Error::InvalidPose("degenerate axis-angle".into()));
        }
        let (axis, angle) = if angle < 0.0 { (-axis, -angle) } else { (axis, angle) };
        let angle = angle.rem_euclid(2.0 * PI);
        let (axis, angle) = if angle > PI { (-axis, 2.0 * PI - angle) } else { (axis, angle) };
        Ok(Self {
            axis: Unit::new_normalize(axis),
            angle,
        })
    }

    /// Log map of a rotation. The identity maps to angle 0 about +x.
    pub fn from_rotation(r: &Matrix3<f64>) -> Self {
        let v = log_so3(r);
        let angle = v.norm();
        if angle == 0.0 {
            Self {
                axis: Vector3::x_axis(),
                angle: 0.0,
            }
        } else {
            Self {
                axis: Unit::new_unchecked(v / angle),
                angle,
            }
        }
    }

    pub fn to_rotation(&self) -> Matrix3<f64> {
        rotation_about(&self.axis, self.angle)
    }

    pub fn scaled_axis(&self) -> Vector3<f64> {
        self.axis.into_inner() * self.angle
    }
}

/// Rotation vector (axis times angle) of `r`, angle in `[0, PI]`.
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    let angle = geodesic_angle(r);
    if angle == 0.0 {
        return Vector3::zeros();
    }
    let w = vee_antisym(r);
    if angle > PI - NEAR_PI {
        // sym(R) = cos(a) I + (1 - cos(a)) n nᵀ; take the best-conditioned column.
        let c = angle.cos();
        let sym = (r + r.transpose()) * 0.5;
        let nn = (sym - Matrix3::identity() * c) / (1.0 - c);
        let k = (0..3)
            .max_by(|&i, &j| nn[(i, i)].total_cmp(&nn[(j, j)]))
            .unwrap_or(0);
        let mut axis: Vector3<f64> = nn.column(k).into_owned();
        axis /= axis.norm();
        // sign from the antisymmetric part: w = 2 sin(a) n
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        return axis * angle;
    }
    let s = angle.sin();
    // angle / (2 sin angle), series near zero
    let factor = if angle < 1e-6 {
        0.5 + angle * angle / 12.0
    } else {
        angle / (2.0 * s)
    };
    w * factor
}

/// Rotation matrix of a rotation vector.
pub fn exp_so3(v: &Vector3<f64>) -> Matrix3<f64> {
    rotation_about(v, v.norm())
}

/// Linear/angular pair; used both as a velocity and as a pose error.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn scaled(&self, k: f64) -> Twist {
        Twist {
            linear: self.linear * k,
            angular: self.angular * k,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.linear.iter().chain(self.angular.iter()).all(|v| *v == 0.0)
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.linear.x,
            self.linear.y,
            self.linear.z,
            self.angular.x,
            self.angular.y,
            self.angular.z,
        ]
    }
}

/// World-frame error from `current` to `desired`.
///
/// `linear` is the translation difference; `angular` is the rotation vector of
/// `R_desired * R_currentᵀ`.
pub fn pose_error(current: &Pose, desired: &Pose) -> Twist {
    if current == desired {
        return Twist::zero();
    }
    Twist {
        linear: desired.translation - current.translation,
        angular: log_so3(&(desired.rotation * current.rotation.transpose())),
    }
}

/// Applies a world-frame displacement twist (already multiplied by time).
pub fn apply_world_twist(pose: &Pose, delta: &Twist) -> Pose {
    Pose {
        rotation: exp_so3(&delta.angular) * pose.rotation,
        translation: pose.translation + delta.linear,
    }
}

/// Translation distance and geodesic angle between two poses.
pub fn pose_distance(a: &Pose, b: &Pose) -> (f64, f64) {
    (
        (a.translation - b.translation).norm(),
        geodesic_angle(&(a.rotation * b.rotation.transpose())),
    )
}

/// `n` near-uniform unit directions on the sphere (golden-angle spiral).
pub fn fibonacci_sphere(n: usize) -> Result<Vec<Vector3<f64>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("fibonacci_sphere needs n >= 1".into()));
    }
    let golden = PI * (3.0 - 5f64.sqrt());
    Ok((0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let theta = golden * i as f64;
            Vector3::new(r * theta.cos(), r * theta.sin(), z)
        })
        .collect())
}

/// Named transforms from the world frame `W` to the configured frames.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameRegistry {
    #[serde(default)]
    frames: BTreeMap<String, Pose>,
}

impl FrameRegistry {
    pub const WORLD: &'static str = "world";
    pub const TRACKER: &'static str = "tracker";
    pub const HEADSET: &'static str = "headset";
    pub const ROBOT_BASE: &'static str = "robot_base";

    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, world_to_frame: Pose) -> Self {
        self.insert(name, world_to_frame);
        self
    }

    pub fn insert(&mut self, name: &str, world_to_frame: Pose) {
        if name != Self::WORLD {
            self.frames.insert(name.to_string(), world_to_frame);
        }
    }

    /// `T_{W->name}`. The world frame and unregistered standard frames map
    /// to identity.
    pub fn world_to(&self, name: &str) -> Pose {
        self.frames.get(name).copied().unwrap_or_else(Pose::identity)
    }

    /// Re-expresses a pose given in frame `name` in the world frame.
    pub fn to_world(&self, name: &str, pose_in_frame: &Pose) -> Pose {
        self.world_to(name).compose(pose_in_frame)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.frames.keys().map(String::as_str)
    }
}
