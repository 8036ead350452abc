//! Desk-scale teleoperation workbench: hand-to-robot mappings, a
//! resolved-rate servo, the reaching protocol, a synthetic operator and the
//! trajectory metrics computed from session logs.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod exec;
pub mod geometry;
pub mod mappings;
pub mod metrics;
pub mod operator;
pub mod robot;
pub mod session;
pub mod task;

pub use error::{Error, Result};
pub use exec::Execution;
pub use geometry::{Pose, WirePose};
pub use mappings::{MappingMode, MappingState, WandGeometry};
pub use robot::{KinematicChain, RobotState, ServoConfig, ServoMode};
pub use session::{ExperimentConfig, Setup, SessionLog, TickRecord};
