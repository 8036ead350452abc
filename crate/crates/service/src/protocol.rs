//! Socket message schema (JSON text frames).
//!
//! Server to client, tagged by `"type"`:
//!
//! ```json
//! {"type":"hello","version":1,"mode":"wand","broadcast_hz":60.0,"dt":0.01,
//!  "hand_start":{"translation":[0.09,0.0,0.31],"rotation":[1.0,0.0,0.0,0.0]}}
//! {"type":"state","version":1,"t":1.25,"mode":"wand","trial":2,"target_index":5,
//!  "visualization_on":true,"running":true,
//!  "hand":{...},"robot":{...},"desired":{...},
//!  "wand":{"length":0.45,"direction":[1.0,0.0,0.0]},
//!  "target":{"index":5,"kind":"central","pose":{...},"color":"red"},
//!  "input_stamp":1712.5}
//! {"type":"error","message":"..."}
//! ```
//!
//! `desired` and `wand` are absent while visualization is off; `wand` is
//! also absent in direct mode. `target` is absent between trials.
//!
//! Client to server:
//!
//! ```json
//! {"type":"input","stamp":1712.5,"hand":{"translation":[0.1,0,0.3],"rotation":[1,0,0,0]}}
//! {"type":"input","control":"start"}
//! ```
//!
//! `control` is one of `start`, `pause`, `next_trial`, `toggle_mode`.

use serde::{Deserialize, Serialize};

use wandbench_core::geometry::{Pose, WirePose};
use wandbench_core::mappings::MappingMode;
use wandbench_core::task::{TargetColor, TargetKind};

use crate::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WandState {
    pub length: f64,
    pub direction: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetState {
    pub index: usize,
    pub kind: TargetKind,
    pub pose: WirePose,
    pub color: TargetColor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub version: u32,
    pub t: f64,
    pub mode: MappingMode,
    pub trial: usize,
    pub target_index: usize,
    pub visualization_on: bool,
    pub running: bool,
    pub hand: WirePose,
    pub robot: WirePose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub desired: Option<WirePose>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wand: Option<WandState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetState>,
    /// `stamp` of the latest input applied, echoed for latency checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_stamp: Option<f64>,
}

impl StateMessage {
    /// Drops everything that reveals the desired pose.
    pub fn hide_desired(mut self) -> Self {
        self.desired = None;
        self.wand = None;
        self
    }
}

// built once per broadcast and serialized right away, so size is not an issue
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        version: u32,
        mode: MappingMode,
        broadcast_hz: f64,
        dt: f64,
        hand_start: WirePose,
    },
    State(StateMessage),
    Error {
        message: String,
    },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }

    pub fn error(message: impl Into<String>) -> Self {
        ServerMessage::Error {
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Control {
    Start,
    Pause,
    NextTrial,
    ToggleMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Input {
        #[serde(default)]
        stamp: Option<f64>,
        #[serde(default)]
        hand: Option<WirePose>,
        #[serde(default)]
        control: Option<Control>,
    },
}

/// A parsed, validated client input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientInput {
    pub stamp: Option<f64>,
    pub hand: Option<Pose>,
    pub control: Option<Control>,
}

impl ClientInput {
    /// Parses a text frame. Quaternions are renormalized on ingest and
    /// rejected when their norm is off by more than 1e-3.
    pub fn parse(text: &str) -> Result<Self, Error> {
        let msg: ClientMessage = serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        let ClientMessage::Input { stamp, hand, control } = msg;
        if stamp.is_some_and(|s| !s.is_finite()) {
            return Err(Error::Malformed("non-finite stamp".into()));
        }
        let hand = hand
            .map(Pose::try_from)
            .transpose()
            .map_err(|e| Error::Malformed(e.to_string()))?;
        if hand.is_none() && control.is_none() {
            return Err(Error::Malformed("input carries neither hand nor control".into()));
        }
        Ok(Self { stamp, hand, control })
    }
}
