//! Reaching protocol: target generation and dwell adjudication.
//!
//! A trial alternates outer and central targets, starting with an outer one
//! so that the 15 outer/central pairs form back-and-forth reaches from the
//! start pose. Index 0 is outer, odd indices are central.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fibonacci_sphere, pose_distance, rotation_about, Pose};
use crate::mappings::MappingState;

pub const TARGETS_PER_TRIAL: usize = 30;
pub const OUTER_TARGETS: usize = TARGETS_PER_TRIAL / 2;
pub const HAND_REACH: f64 = 0.15;
pub const MAX_OUTER_ROTATION_DEG: f64 = 45.0;
pub const TOL_TRANSLATION: f64 = 0.02;
pub const TOL_ROTATION_DEG: f64 = 10.0;
pub const DWELL_SECONDS: f64 = 1.0;
/// Absorbs floating-point drift in `now - inside_since`.
const DWELL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Central,
    Outer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub index: usize,
    pub kind: TargetKind,
    /// Hand pose that attains the target exactly under the active mapping.
    pub hand_endpoint: Pose,
    /// `T_{W->target}`.
    pub effector_target: Pose,
    pub tol_translation: f64,
    /// Radians.
    pub tol_rotation: f64,
    pub dwell: f64,
}

impl TargetSpec {
    /// Inclusive tolerance test on translation distance and geodesic angle.
    pub fn contains(&self, pose: &Pose) -> bool {
        let (dx, dr) = pose_distance(pose, &self.effector_target);
        dx <= self.tol_translation && dr <= self.tol_rotation
    }
}

/// Hand-side geometry of one outer target, shared by every mapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandOffset {
    pub direction: Vector3<f64>,
    pub rotation_axis: Vector3<f64>,
    /// Radians in `[0, 45°]`.
    pub rotation_angle: f64,
}

/// Seeded hand offsets for the outer targets, in Fibonacci order.
pub fn outer_hand_offsets(seed: u64) -> Vec<HandOffset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = fibonacci_sphere(OUTER_TARGETS).expect("n > 0");
    dirs.into_iter()
        .map(|direction| {
            let axis = loop {
                let v = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                let n = v.norm();
                if n > 1e-9 {
                    break v / n;
                }
            };
            let angle = rng.random_range(0.0..=MAX_OUTER_ROTATION_DEG.to_radians());
            HandOffset {
                direction,
                rotation_axis: axis,
                rotation_angle: angle,
            }
        })
        .collect()
}

/// Hand endpoint for an outer target: translated along `direction` and
/// rotated about a world-frame axis through the hand origin.
pub fn outer_hand_endpoint(hand_start: &Pose, off: &HandOffset) -> Pose {
    Pose {
        rotation: rotation_about(&off.rotation_axis, off.rotation_angle) * hand_start.rotation,
        translation: hand_start.translation + off.direction * HAND_REACH,
    }
}

/// The 30 targets of one trial. Identical for every trial with the same
/// seed; the hand endpoints are also identical across mappings.
pub fn generate_targets(seed: u64, mapping: &MappingState, hand_start: &Pose) -> Vec<TargetSpec> {
    let offsets = outer_hand_offsets(seed);
    let mut out = Vec::with_capacity(TARGETS_PER_TRIAL);
    for (i, off) in offsets.iter().enumerate() {
        for (kind, hand) in [
            (TargetKind::Outer, outer_hand_endpoint(hand_start, off)),
            (TargetKind::Central, *hand_start),
        ] {
            out.push(TargetSpec {
                index: 2 * i + (kind == TargetKind::Central) as usize,
                kind,
                hand_endpoint: hand,
                effector_target: mapping.desired_pose(&hand),
                tol_translation: TOL_TRANSLATION,
                tol_rotation: TOL_ROTATION_DEG.to_radians(),
                dwell: DWELL_SECONDS,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DwellTracker {
    pub inside_since: Option<f64>,
    pub achieved: bool,
    last: Option<f64>,
    inside: bool,
}

impl DwellTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Whether the last update was inside tolerance.
    pub fn inside(&self) -> bool {
        self.inside
    }

    /// Feeds one robot sample. Achievement is latched once reached.
    pub fn update(self, robot_pose: &Pose, target: &TargetSpec, now: f64) -> Result<Self> {
        if let Some(last) = self.last {
            if now < last {
                return Err(Error::TimeReversed { now, last });
            }
        }
        let mut next = self;
        next.last = Some(now);
        if self.achieved {
            return Ok(next);
        }
        next.inside = target.contains(robot_pose);
        if next.inside {
            let since = *next.inside_since.get_or_insert(now);
            if now - since >= target.dwell - DWELL_EPS {
                next.achieved = true;
            }
        } else {
            next.inside_since = None;
        }
        Ok(next)
    }
}

pub fn update_dwell(tracker: DwellTracker, robot_pose: &Pose, target: &TargetSpec, now: f64) -> Result<DwellTracker> {
    tracker.update(robot_pose, target, now)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetColor {
    Red,
    Green,
    Hidden,
}

pub fn target_color(tracker: &DwellTracker) -> TargetColor {
    if tracker.achieved {
        TargetColor::Hidden
    } else if tracker.inside {
        TargetColor::Green
    } else {
        TargetColor::Red
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::geodesic_angle;
    use crate::mappings::{init_mapping, MappingMode, WandGeometry};

    fn setup(mode: MappingMode) -> (MappingState, Pose) {
        let hand = Pose::from_translation(Vector3::new(0.8, 0.0, 0.3));
        let eff = hand.compose(&WandGeometry::default().offset());
        (init_mapping(mode, hand, eff, true), hand)
    }

    fn target_at(p: Pose) -> TargetSpec {
        TargetSpec {
            index: 0,
            kind: TargetKind::Outer,
            hand_endpoint: p,
            effector_target: p,
            tol_translation: TOL_TRANSLATION,
            tol_rotation: TOL_ROTATION_DEG.to_radians(),
            dwell: DWELL_SECONDS,
        }
    }

    #[test]
    fn outer_translations_and_rotations() {
        let (m, hand) = setup(MappingMode::Wand);
        for seed in [0, 1, 42, 9999] {
            let ts = generate_targets(seed, &m, &hand);
            assert_eq!(ts.len(), 30);
            for t in ts.iter().filter(|t| t.kind == TargetKind::Outer) {
                let d = (t.hand_endpoint.translation - hand.translation).norm();
                assert!((d - 0.15).abs() <= 1e-12);
                let a = geodesic_angle(&(t.hand_endpoint.rotation * hand.rotation.transpose()));
                assert!(a <= 45f64.to_radians() + 1e-9);
            }
        }
    }

    #[test]
    fn alternation_and_indices() {
        let (m, hand) = setup(MappingMode::Direct);
        let ts = generate_targets(3, &m, &hand);
        for (i, t) in ts.iter().enumerate() {
            assert_eq!(t.index, i);
            let expect = if i % 2 == 0 { TargetKind::Outer } else { TargetKind::Central };
            assert_eq!(t.kind, expect);
            if t.kind == TargetKind::Central {
                assert_eq!(t.hand_endpoint, hand);
            }
        }
    }

    #[test]
    fn cross_mode_hand_endpoints_match() {
        let (d, hand) = setup(MappingMode::Direct);
        let (w, _) = setup(MappingMode::Wand);
        let td = generate_targets(11, &d, &hand);
        let tw = generate_targets(11, &w, &hand);
        for (a, b) in td.iter().zip(&tw) {
            assert_eq!(a.hand_endpoint, b.hand_endpoint);
            let rotated = geodesic_angle(&(a.hand_endpoint.rotation * hand.rotation.transpose())) > 1e-9;
            if rotated {
                assert!(a.effector_target.max_abs_diff(&b.effector_target) > 1e-6);
            }
        }
    }

    #[test]
    fn dwell_exact_one_second() {
        let p = Pose::identity();
        let target = target_at(p);
        let mut tr = DwellTracker::new();
        for i in 0..=100 {
            tr = tr.update(&p, &target, i as f64 * 0.01).unwrap();
        }
        assert!(tr.achieved);
    }

    #[test]
    fn dwell_requires_continuity() {
        let target = target_at(Pose::identity());
        let away = Pose::from_translation(Vector3::new(0.5, 0.0, 0.0));
        let mut tr = DwellTracker::new();
        let mut tick = 0;
        let mut feed = |tr: DwellTracker, p: &Pose, n: usize| {
            let mut tr = tr;
            for _ in 0..n {
                tr = tr.update(p, &target, tick as f64 * 0.01).unwrap();
                tick += 1;
            }
            tr
        };
        tr = feed(tr, &Pose::identity(), 90);
        tr = feed(tr, &away, 1);
        tr = feed(tr, &Pose::identity(), 90);
        assert!(!tr.achieved);
    }

    #[test]
    fn dwell_boundary_inside() {
        let target = target_at(Pose::identity());
        let near = Pose {
            rotation: rotation_about(&Vector3::y(), 9.9f64.to_radians()),
            translation: Vector3::new(0.019, 0.0, 0.0),
        };
        let mut tr = DwellTracker::new();
        for i in 0..=100 {
            tr = update_dwell(tr, &near, &target, i as f64 * 0.01).unwrap();
        }
        assert!(tr.achieved);
    }

    #[test]
    fn time_reversal_rejected() {
        let target = target_at(Pose::identity());
        let tr = DwellTracker::new().update(&Pose::identity(), &target, 1.0).unwrap();
        assert!(matches!(
            tr.update(&Pose::identity(), &target, 0.5),
            Err(Error::TimeReversed { .. })
        ));
    }

    #[test]
    fn colors() {
        let target = target_at(Pose::identity());
        let away = Pose::from_translation(Vector3::new(0.5, 0.0, 0.0));
        let tr = DwellTracker::new().update(&Pose::identity(), &target, 0.0).unwrap();
        assert_eq!(target_color(&tr), TargetColor::Green);
        let tr = tr.update(&away, &target, 0.1).unwrap();
        assert_eq!(target_color(&tr), TargetColor::Red);
        let mut tr = tr;
        for i in 0..=100 {
            tr = tr.update(&Pose::identity(), &target, 0.2 + i as f64 * 0.01).unwrap();
        }
        assert_eq!(target_color(&tr), TargetColor::Hidden);
    }
}
