//! Hand-to-desired-effector mappings.
//!
//! * Direct: the desired effector's displacement in its own initial frame
//!   equals the hand's displacement in the hand's initial frame,
//!   `T_{E*(t0)->E*(t)} = T_{H(t0)->H(t)}`.
//! * Wand: the desired effector is rigidly attached to the hand,
//!   `T_{W->E*(t)} = T_{W->H(t)} T_{H->E*}` with `T_{H->E*}` frozen at `t0`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingMode {
    Direct,
    Wand,
}

impl MappingMode {
    pub const ALL: [MappingMode; 2] = [MappingMode::Direct, MappingMode::Wand];

    pub fn as_str(&self) -> &'static str {
        match self {
            MappingMode::Direct => "direct",
            MappingMode::Wand => "wand",
        }
    }

    pub fn other(&self) -> MappingMode {
        match self {
            MappingMode::Direct => MappingMode::Wand,
            MappingMode::Wand => MappingMode::Direct,
        }
    }
}

impl fmt::Display for MappingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MappingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(MappingMode::Direct),
            "wand" => Ok(MappingMode::Wand),
            other => Err(Error::InvalidArgument(format!("unknown mapping mode {other:?}"))),
        }
    }
}

/// Virtual stick held by the operator: its length and pointing direction in
/// the hand frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WandGeometry {
    pub length: f64,
    pub direction: Unit<Vector3<f64>>,
}

impl Default for WandGeometry {
    fn default() -> Self {
        Self {
            length: 0.45,
            direction: Vector3::x_axis(),
        }
    }
}

impl WandGeometry {
    pub fn new(length: f64, direction: Vector3<f64>) -> Result<Self> {
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::InvalidConfig(format!("wand length {length} must be > 0")));
        }
        if !(direction.norm() > 0.0) {
            return Err(Error::InvalidConfig("wand direction must be non-zero".into()));
        }
        Ok(Self {
            length,
            direction: Unit::new_normalize(direction),
        })
    }

    /// Hand-to-tip transform: pure translation along the wand.
    pub fn offset(&self) -> Pose {
        Pose::from_translation(self.direction.into_inner() * self.length)
    }
}

/// Frozen anchors of one mapping instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingState {
    mode: MappingMode,
    hand_t0: Pose,
    effector_t0: Pose,
    hand_to_tip: Option<Pose>,
    visualization_on: bool,
}

impl MappingState {
    /// Freezes the anchors at `t0`. In wand mode the hand-to-tip transform is
    /// captured once here.
    pub fn init(mode: MappingMode, hand_t0: Pose, effector_t0: Pose, visualization_on: bool) -> Self {
        let hand_to_tip = match mode {
            MappingMode::Direct => None,
            MappingMode::Wand => {
                let tip = hand_t0.invert().compose(&effector_t0);
                if tip.translation.norm() < 1e-12 {
                    log::warn!("wand mapping initialized with zero-length wand");
                }
                Some(tip)
            }
        };
        Self {
            mode,
            hand_t0,
            effector_t0,
            hand_to_tip,
            visualization_on,
        }
    }

    pub fn mode(&self) -> MappingMode {
        self.mode
    }

    pub fn hand_t0(&self) -> &Pose {
        &self.hand_t0
    }

    pub fn effector_t0(&self) -> &Pose {
        &self.effector_t0
    }

    pub fn hand_to_tip(&self) -> Option<&Pose> {
        self.hand_to_tip.as_ref()
    }

    pub fn visualization_on(&self) -> bool {
        self.visualization_on
    }

    /// True for a wand whose tip coincides with the hand origin.
    pub fn is_degenerate_wand(&self) -> bool {
        self.hand_to_tip
            .map(|t| t.translation.norm() < 1e-12)
            .unwrap_or(false)
    }

    /// Distance from hand origin to tip; `None` in direct mode.
    pub fn wand_length(&self) -> Option<f64> {
        self.hand_to_tip.map(|t| t.translation.norm())
    }

    /// Visualization only affects what is displayed; the mapping output is
    /// unchanged.
    pub fn set_visualization(mut self, on: bool) -> Self {
        self.visualization_on = on;
        self
    }

    /// `T_{W->E*(t)}` for the hand pose `T_{W->H(t)}`.
    pub fn desired_pose(&self, hand_t: &Pose) -> Pose {
        match self.hand_to_tip {
            None => {
                let hand_motion = self.hand_t0.invert().compose(hand_t);
                self.effector_t0.compose(&hand_motion)
            }
            Some(tip) => hand_t.compose(&tip),
        }
    }

    /// Hand pose that produces `desired`; the inverse of [`desired_pose`].
    ///
    /// [`desired_pose`]: MappingState::desired_pose
    pub fn hand_for_desired(&self, desired: &Pose) -> Pose {
        match self.hand_to_tip {
            None => self
                .hand_t0
                .compose(&self.effector_t0.invert())
                .compose(desired),
            Some(tip) => desired.compose(&tip.invert()),
        }
    }
}

/// Free-function form of [`MappingState::init`].
pub fn init_mapping(mode: MappingMode, hand_t0: Pose, effector_t0: Pose, visualization_on: bool) -> MappingState {
    MappingState::init(mode, hand_t0, effector_t0, visualization_on)
}
