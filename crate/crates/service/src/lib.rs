//! WebSocket front end for the workbench: a live session driven by browser
//! hand input, and timed playback of recorded logs.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod live;
pub mod protocol;
pub mod replay;
pub mod server;

pub use live::LiveSession;
pub use protocol::{ClientInput, Control, ServerMessage, StateMessage, SCHEMA_VERSION};
pub use replay::{replay_stream, state_from_record, ReplayStats};
pub use server::{serve, serve_replay, RunningService, ServeConfig, CLIENT_QUEUE, DEFAULT_BROADCAST_HZ};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("service closed: {0}")]
    Closed(String),
    #[error(transparent)]
    Core(#[from] wandbench_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
