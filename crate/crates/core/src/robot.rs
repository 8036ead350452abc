//! Simulated manipulator servoed toward the desired effector pose.
//!
//! Two plants are available. `PoseServo` moves the effector pose directly
//! under the first-order law `ė = -k e`, integrated exactly over each step.
//! `JointSpace` runs resolved-rate control on a serial chain: the commanded
//! twist `k e` is resolved to joint rates through a damped least-squares
//! inverse of the geometric Jacobian.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Unit, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{apply_world_twist, pose_distance, pose_error, rotation_about, Pose};

/// Slack on joint limits when validating configurations.
const LIMIT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    #[serde(default)]
    pub name: String,
    /// Rotation axis in the joint frame.
    pub axis: Unit<Vector3<f64>>,
    /// Fixed transform from the previous joint frame to this one.
    pub origin: Pose,
    pub lower: f64,
    pub upper: f64,
    pub max_velocity: f64,
}

/// Revolute serial chain `base * (origin_i * Rot(axis_i, q_i))... * tool`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    pub base: Pose,
    pub joints: Vec<Joint>,
    #[serde(default)]
    pub tool: Pose,
    /// Joint configuration used to reset the robot at the start of a trial.
    #[serde(default)]
    pub home: Vec<f64>,
}

impl KinematicChain {
    pub fn new(base: Pose, joints: Vec<Joint>, tool: Pose, home: Vec<f64>) -> Result<Self> {
        let chain = Self {
            base,
            joints,
            tool,
            home,
        };
        chain.validate()?;
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::InvalidConfig("chain needs at least one joint".into()));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if !(j.lower <= j.upper) {
                return Err(Error::InvalidConfig(format!("joint {i}: lower > upper")));
            }
            if !(j.max_velocity > 0.0) {
                return Err(Error::InvalidConfig(format!("joint {i}: max_velocity must be > 0")));
            }
        }
        if !self.home.is_empty() {
            self.check_limits(&self.home)?;
        }
        Ok(())
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    pub fn home(&self) -> Vec<f64> {
        if self.home.is_empty() {
            vec![0.0; self.dof()]
        } else {
            self.home.clone()
        }
    }

    /// Anthropomorphic 7-joint arm with a spherical shoulder and wrist,
    /// roughly 0.9 m of reach from the shoulder.
    pub fn default_7dof() -> Self {
        use std::f64::consts::TAU;
        let z = Vector3::z_axis();
        let y = Vector3::y_axis();
        let specs: [(Unit<Vector3<f64>>, f64, f64, f64); 7] = [
            (z, 0.1564, TAU, 1.39),
            (y, 0.1284, 2.41, 1.39),
            (z, 0.2104, TAU, 1.39),
            (y, 0.2104, 2.66, 1.39),
            (z, 0.2084, TAU, 1.22),
            (y, 0.1059, 2.23, 1.22),
            (z, 0.1059, TAU, 1.22),
        ];
        let joints = specs
            .iter()
            .enumerate()
            .map(|(i, &(axis, offset, limit, vmax))| Joint {
                name: format!("joint_{}", i + 1),
                axis,
                origin: Pose::from_translation(Vector3::new(0.0, 0.0, offset)),
                lower: -limit,
                upper: limit,
                max_velocity: vmax,
            })
            .collect();
        Self {
            base: Pose::identity(),
            joints,
            tool: Pose::from_translation(Vector3::new(0.0, 0.0, 0.0615)),
            home: vec![0.0, 0.35, 0.0, 1.9, 0.0, 0.9, 0.0],
        }
    }

    /// Two revolute joints about z with unit links along x.
    pub fn planar_2r(l1: f64, l2: f64) -> Self {
        let joint = |name: &str, offset: f64| Joint {
            name: name.into(),
            axis: Vector3::z_axis(),
            origin: Pose::from_translation(Vector3::new(offset, 0.0, 0.0)),
            lower: -std::f64::consts::PI,
            upper: std::f64::consts::PI,
            max_velocity: 10.0,
        };
        Self {
            base: Pose::identity(),
            joints: vec![joint("shoulder", 0.0), joint("elbow", l1)],
            tool: Pose::from_translation(Vector3::new(l2, 0.0, 0.0)),
            home: vec![],
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let chain: KinematicChain = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        chain.validate()?;
        Ok(chain)
    }

    /// SHA-256 over the canonical JSON encoding, hex encoded.
    pub fn checksum(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("chain serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn check_limits(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dof() {
            return Err(Error::InvalidArgument(format!(
                "expected {} joint values, got {}",
                self.dof(),
                q.len()
            )));
        }
        for (i, (j, &v)) in self.joints.iter().zip(q).enumerate() {
            if !(v >= j.lower - LIMIT_SLACK && v <= j.upper + LIMIT_SLACK) {
                return Err(Error::JointLimit {
                    joint: i,
                    value: v,
                    lower: j.lower,
                    upper: j.upper,
                });
            }
        }
        Ok(())
    }

    /// World pose of every joint frame (after its origin, before its
    /// rotation), followed by the effector pose.
    fn frames(&self, q: &[f64]) -> (Vec<Pose>, Pose) {
        let mut t = self.base;
        let mut frames = Vec::with_capacity(self.dof());
        for (j, &qi) in self.joints.iter().zip(q) {
            t = t.compose(&j.origin);
            frames.push(t);
            t = t.compose(&Pose::from_rotation(rotation_about(&j.axis, qi)));
        }
        (frames, t.compose(&self.tool))
    }

    pub fn forward_kinematics(&self, q: &[f64]) -> Result<Pose> {
        self.check_limits(q)?;
        Ok(self.frames(q).1)
    }

    /// Geometric Jacobian, 6×n, linear rows first, world frame, referenced
    /// at the effector origin.
    pub fn jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        self.check_limits(q)?;
        let (frames, eff) = self.frames(q);
        let mut jac = DMatrix::zeros(6, self.dof());
        for (i, (f, j)) in frames.iter().zip(&self.joints).enumerate() {
            let axis = f.rotation * j.axis.into_inner();
            let lin = axis.cross(&(eff.translation - f.translation));
            for r in 0..3 {
                jac[(r, i)] = lin[r];
                jac[(r + 3, i)] = axis[r];
            }
        }
        Ok(jac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ServoMode {
    #[default]
    PoseServo,
    JointSpace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServoConfig {
    /// Proportional gain in 1/s.
    pub k: f64,
    /// Integration step in seconds.
    pub dt: f64,
    /// Damping of the least-squares inverse.
    pub damping: f64,
    pub mode: ServoMode,
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            k: 0.5,
            dt: 0.01,
            damping: 0.05,
            mode: ServoMode::PoseServo,
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0) || !(self.dt > 0.0) || !(self.k * self.dt < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "servo needs k > 0, dt > 0, k*dt < 1 (k={}, dt={})",
                self.k, self.dt
            )));
        }
        if !(self.damping >= 0.0) {
            return Err(Error::InvalidConfig("damping must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    /// Joint positions; empty for the pose-servo plant.
    pub q: Vec<f64>,
    /// `T_{W->E_R}`.
    pub pose: Pose,
    pub t: f64,
}

impl RobotState {
    pub fn at_pose(pose: Pose) -> Self {
        Self {
            q: Vec::new(),
            pose,
            t: 0.0,
        }
    }

    pub fn at_joints(chain: &KinematicChain, q: Vec<f64>) -> Result<Self> {
        let pose = chain.forward_kinematics(&q)?;
        Ok(Self { q, pose, t: 0.0 })
    }
}

/// Flags raised by a servo step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ServoStatus {
    pub velocity_saturated: bool,
    pub position_clamped: bool,
    /// Error did not decrease although it is non-zero.
    pub stalled: bool,
}

impl ServoStatus {
    pub fn limit_active(&self) -> bool {
        self.velocity_saturated || self.position_clamped
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServoStep {
    pub state: RobotState,
    pub status: ServoStatus,
}

/// Solves `(J Jᵀ + λ² I) y = v` and returns `Jᵀ y`.
pub fn damped_least_squares(jac: &DMatrix<f64>, v: &DVector<f64>, damping: f64) -> DVector<f64> {
    let rows = jac.nrows();
    let a = jac * jac.transpose() + DMatrix::identity(rows, rows) * (damping * damping);
    let y = match a.clone().cholesky() {
        Some(ch) => ch.solve(v),
        // λ = 0 at a singular configuration: fall back to the SVD pseudo-inverse.
        None => a
            .svd(true, true)
            .solve(v, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(rows)),
    };
    jac.transpose() * y
}

/// Advances the robot by one `cfg.dt` toward `desired`.
pub fn servo_step(
    chain: &KinematicChain,
    state: &RobotState,
    desired: &Pose,
    cfg: &ServoConfig,
) -> Result<ServoStep> {
    cfg.validate()?;
    let err = pose_error(&state.pose, desired);
    let t = state.t + cfg.dt;
    if err.is_zero() {
        return Ok(ServoStep {
            state: RobotState {
                t,
                ..state.clone()
            },
            status: ServoStatus::default(),
        });
    }
    let before = pose_distance(&state.pose, desired);
    let mut status = ServoStatus::default();

    let next = match cfg.mode {
        ServoMode::PoseServo => {
            // exact solution of ė = -k e over one step
            let alpha = -(-cfg.k * cfg.dt).exp_m1();
            RobotState {
                q: state.q.clone(),
                pose: apply_world_twist(&state.pose, &err.scaled(alpha)),
                t,
            }
        }
        ServoMode::JointSpace => {
            let jac = chain.jacobian(&state.q)?;
            let command = DVector::from_row_slice(&err.scaled(cfg.k).as_array());
            let qdot = damped_least_squares(&jac, &command, cfg.damping);
            let mut q = state.q.clone();
            for ((qi, j), &rate) in q.iter_mut().zip(&chain.joints).zip(qdot.iter()) {
                let mut rate = rate;
                if rate.abs() > j.max_velocity {
                    rate = rate.signum() * j.max_velocity;
                    status.velocity_saturated = true;
                }
                let moved = *qi + rate * cfg.dt;
                let clamped = moved.clamp(j.lower, j.upper);
                if clamped != moved {
                    status.position_clamped = true;
                }
                *qi = clamped;
            }
            if status.limit_active() {
                log::debug!("joint limit active at t={t:.3}: {status:?}");
            }
            let pose = chain.forward_kinematics(&q)?;
            RobotState { q, pose, t }
        }
    };

    let after = pose_distance(&next.pose, desired);
    status.stalled = after.0 >= before.0 && after.1 >= before.1;
    Ok(ServoStep {
        state: next,
        status,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn planar_2r_straight_and_bent() {
        let c = KinematicChain::planar_2r(1.0, 1.0);
        let p = c.forward_kinematics(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p.translation, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-15);
        let p = c.forward_kinematics(&[FRAC_PI_2, 0.0]).unwrap();
        assert_abs_diff_eq!(p.translation, Vector3::new(0.0, 2.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn default_home_pose_is_documented_constant() {
        let c = KinematicChain::default_7dof();
        let p = c.forward_kinematics(&[0.0; 7]).unwrap();
        // all links stacked along z
        let height = 0.1564 + 0.1284 + 0.2104 + 0.2104 + 0.2084 + 0.1059 + 0.1059 + 0.0615;
        assert_abs_diff_eq!(p.translation, Vector3::new(0.0, 0.0, height), epsilon = 1e-12);
        assert!(c.forward_kinematics(&c.home()).is_ok());
    }

    #[test]
    fn out_of_limit_rejected() {
        let c = KinematicChain::default_7dof();
        let mut q = vec![0.0; 7];
        q[1] = 3.0;
        assert!(matches!(c.forward_kinematics(&q), Err(Error::JointLimit { joint: 1, .. })));
        assert!(c.forward_kinematics(&[0.0; 3]).is_err());
    }

    #[test]
    fn planar_2r_jacobian_analytic() {
        let c = KinematicChain::planar_2r(1.0, 1.0);
        let j = c.jacobian(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(j[(0, 0)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(j[(0, 1)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(j[(1, 0)], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(j[(1, 1)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(j[(5, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn single_joint_column() {
        let c = KinematicChain::new(
            Pose::identity(),
            vec![Joint {
                name: "z".into(),
                axis: Vector3::z_axis(),
                origin: Pose::identity(),
                lower: -1.0,
                upper: 1.0,
                max_velocity: 1.0,
            }],
            Pose::from_translation(Vector3::x()),
            vec![],
        )
        .unwrap();
        let j = c.jacobian(&[0.0]).unwrap();
        let col: Vec<f64> = j.column(0).iter().copied().collect();
        assert_eq!(col, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn desired_equal_current_is_fixed_point() {
        let c = KinematicChain::default_7dof();
        let s = RobotState::at_joints(&c, c.home()).unwrap();
        for mode in [ServoMode::PoseServo, ServoMode::JointSpace] {
            let cfg = ServoConfig { mode, ..Default::default() };
            let next = servo_step(&c, &s, &s.pose.clone(), &cfg).unwrap();
            assert_eq!(next.state.pose, s.pose);
            assert_eq!(next.state.q, s.q);
        }
    }

    #[test]
    fn pose_servo_translation_decay() {
        let c = KinematicChain::default_7dof();
        let cfg = ServoConfig::default();
        let desired = Pose::from_translation(Vector3::new(0.10, 0.0, 0.0));
        let mut s = RobotState::at_pose(Pose::identity());
        for _ in 0..200 {
            s = servo_step(&c, &s, &desired, &cfg).unwrap().state;
        }
        let e = (desired.translation - s.pose.translation).norm();
        assert_abs_diff_eq!(e, 0.10 * (-1.0f64).exp(), epsilon = 1e-4);
        assert_abs_diff_eq!(e, 0.03679, epsilon = 1e-4);
    }

    #[test]
    fn joint_space_2r_converges() {
        let c = KinematicChain::planar_2r(1.0, 1.0);
        let q0 = vec![0.4, 0.8];
        let s0 = RobotState::at_joints(&c, q0).unwrap();
        // reachable: FK of a nearby configuration
        let desired = c.forward_kinematics(&[0.55, 0.6]).unwrap();
        let cfg = ServoConfig { mode: ServoMode::JointSpace, ..Default::default() };
        let mut s = s0;
        let mut last = f64::INFINITY;
        for _ in 0..1500 {
            s = servo_step(&c, &s, &desired, &cfg).unwrap().state;
            let e = (desired.translation - s.pose.translation).norm();
            assert!(e <= last + 1e-12);
            last = e;
        }
        assert!(last < 1e-3, "final error {last}");
    }

    #[test]
    fn invalid_servo_config() {
        let cfg = ServoConfig { k: 200.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!(ServoConfig { dt: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn chain_checksum_stable() {
        let a = KinematicChain::default_7dof();
        assert_eq!(a.checksum(), a.clone().checksum());
        assert_ne!(a.checksum(), KinematicChain::planar_2r(1.0, 1.0).checksum());
    }
}
