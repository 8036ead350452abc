//! Synthetic operator: two-phase reaching trajectories.
//!
//! A reach is a ballistic minimum-jerk sub-movement covering
//! `ballistic_amplitude` of the displacement in the first
//! `ballistic_fraction` of the duration, followed by a minimum-jerk
//! correction. Translation and rotation share the same scalar profile in
//! each phase.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, log_so3, Pose};

/// `10s³ - 15s⁴ + 6s⁵`, with `s` clamped to `[0, 1]`.
pub fn minimum_jerk(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
}

/// Derivative of [`minimum_jerk`] with respect to `s`.
pub fn minimum_jerk_rate(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    30.0 * s * s * (1.0 - s) * (1.0 - s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReachPlan {
    pub from: Pose,
    pub to: Pose,
    pub duration: f64,
    pub ballistic_fraction: f64,
    pub ballistic_amplitude: f64,
    pub noise_scale: f64,
    #[serde(default)]
    pub noise_seed: u64,
}

/// Timing and shape of synthetic reaches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReachProfile {
    pub duration: f64,
    pub ballistic_fraction: f64,
    pub ballistic_amplitude: f64,
    pub noise_scale: f64,
}

impl Default for ReachProfile {
    fn default() -> Self {
        Self {
            duration: 2.0,
            ballistic_fraction: 0.5,
            ballistic_amplitude: 0.9,
            noise_scale: 0.0,
        }
    }
}

impl ReachProfile {
    pub fn plan(&self, from: Pose, to: Pose, noise_seed: u64) -> Result<ReachPlan> {
        ReachPlan::new(
            from,
            to,
            self.duration,
            self.ballistic_fraction,
            self.ballistic_amplitude,
            self.noise_scale,
            noise_seed,
        )
    }
}

/// Seeded smooth perturbation applied during the correction phase.
#[derive(Debug, Clone, Copy)]
struct Wobble {
    linear: Vector3<f64>,
    angular: Vector3<f64>,
}

impl ReachPlan {
    pub fn new(
        from: Pose,
        to: Pose,
        duration: f64,
        ballistic_fraction: f64,
        ballistic_amplitude: f64,
        noise_scale: f64,
        noise_seed: u64,
    ) -> Result<Self> {
        if !(duration > 0.0) {
            return Err(Error::InvalidArgument("reach duration must be > 0".into()));
        }
        if !(ballistic_fraction > 0.0 && ballistic_fraction < 1.0) {
            return Err(Error::InvalidArgument("ballistic_fraction must be in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&ballistic_amplitude) {
            return Err(Error::InvalidArgument("ballistic_amplitude must be in [0, 1]".into()));
        }
        if !(noise_scale >= 0.0) {
            return Err(Error::InvalidArgument("noise_scale must be >= 0".into()));
        }
        Ok(Self {
            from,
            to,
            duration,
            ballistic_fraction,
            ballistic_amplitude,
            noise_scale,
            noise_seed,
        })
    }

    /// Scalar progress along the reach at time `t` (0 at start, 1 at end).
    pub fn progress(&self, t: f64) -> f64 {
        let split = self.ballistic_fraction * self.duration;
        if t < split {
            self.ballistic_amplitude * minimum_jerk(t / split)
        } else {
            let s = (t - split) / (self.duration - split);
            self.ballistic_amplitude + (1.0 - self.ballistic_amplitude) * minimum_jerk(s)
        }
    }

    fn wobble(&self) -> Wobble {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let mut v = || {
            Vector3::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            )
        };
        let lin_amp = (self.to.translation - self.from.translation).norm();
        let rot_amp = log_so3(&(self.to.rotation * self.from.rotation.transpose())).norm();
        let linear: Vector3<f64> = v() * (self.noise_scale * lin_amp);
        let angular: Vector3<f64> = v() * (self.noise_scale * rot_amp);
        Wobble { linear, angular }
    }

    /// Hand pose at time `t`, clamped to `[0, duration]`.
    pub fn pose_at(&self, t: f64) -> Pose {
        let t = t.clamp(0.0, self.duration);
        if t >= self.duration && self.noise_scale == 0.0 {
            return self.to;
        }
        let p = self.progress(t);
        let delta_rot = log_so3(&(self.to.rotation * self.from.rotation.transpose()));
        let mut rotation = exp_so3(&(delta_rot * p)) * self.from.rotation;
        let mut translation = self.from.translation + (self.to.translation - self.from.translation) * p;

        let split = self.ballistic_fraction * self.duration;
        if self.noise_scale > 0.0 && t > split {
            // bump vanishing at both ends of the correction phase
            let s = (t - split) / (self.duration - split);
            let bump = (std::f64::consts::PI * s).sin();
            let w = self.wobble();
            translation += w.linear * bump;
            rotation = exp_so3(&(w.angular * bump)) * rotation;
        }
        Pose {
            rotation,
            translation,
        }
    }
}

pub fn hand_pose_at(plan: &ReachPlan, t: f64) -> Pose {
    plan.pose_at(t)
}
