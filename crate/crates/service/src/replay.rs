//! Timed re-broadcast of a session log.

use std::io::BufRead;
use std::time::Duration;

use tokio::time::{sleep_until, Instant};

use wandbench_core::session::{parse_line, LogHeader, LogLine, Setup, WireTickRecord};
use wandbench_core::task::{TargetColor, TargetSpec};

use crate::protocol::{ServerMessage, StateMessage, TargetState, WandState, SCHEMA_VERSION};
use crate::Error;

/// Converts one logged tick to a state message. Pose numbers are copied
/// from the log unchanged.
pub fn state_from_record(header: &LogHeader, targets: &[TargetSpec], rec: &WireTickRecord) -> StateMessage {
    let target = targets.get(rec.target).map(|t| TargetState {
        index: t.index,
        kind: t.kind,
        pose: t.effector_target.wire(),
        color: if rec.inside { TargetColor::Green } else { TargetColor::Red },
    });
    let wand = (header.mode == wandbench_core::mappings::MappingMode::Wand).then(|| {
        let d = rec.desired.translation;
        let h = rec.hand.translation;
        WandState {
            length: ((d[0] - h[0]).powi(2) + (d[1] - h[1]).powi(2) + (d[2] - h[2]).powi(2)).sqrt(),
            direction: header.wand.direction.into_inner().into(),
        }
    });
    let msg = StateMessage {
        version: SCHEMA_VERSION,
        t: rec.t,
        mode: header.mode,
        trial: rec.trial,
        target_index: rec.target,
        visualization_on: rec.visualization,
        running: true,
        hand: rec.hand,
        robot: rec.robot,
        desired: Some(rec.desired),
        wand,
        target,
        input_stamp: None,
    };
    if rec.visualization {
        msg
    } else {
        msg.hide_desired()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayStats {
    pub frames: usize,
    /// Log time covered, in seconds.
    pub log_seconds: f64,
    pub wall_seconds: f64,
}

/// Streams every tick of `reader` to `send`, paced so that log time runs
/// `speed` times faster than wall time. Mode sections are played back to
/// back. A corrupt line stops the stream after an error frame is sent.
/// `send` returning `false` stops the stream early (client gone).
pub async fn replay_stream<R, F>(reader: R, speed: f64, mut send: F) -> Result<ReplayStats, Error>
where
    R: BufRead,
    F: FnMut(String) -> bool,
{
    if !(speed > 0.0) || !speed.is_finite() {
        return Err(Error::Malformed(format!("replay speed {speed} must be > 0")));
    }
    let start = Instant::now();
    let mut section: Option<(LogHeader, Vec<TargetSpec>)> = None;
    // log time already played by earlier sections, and this section's t0
    let (mut played, mut section_t0, mut last_t) = (0.0f64, None::<f64>, 0.0f64);
    let mut frames = 0;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = parse_line::<wandbench_core::geometry::WirePose>(&line);
        let parsed = match parsed {
            Ok(p) => p,
            Err(e) => {
                let msg = format!("line {}: {e}", n + 1);
                send(ServerMessage::error(&msg).to_json());
                return Err(Error::Malformed(msg));
            }
        };
        match parsed {
            LogLine::Header(h) => {
                if let Some(t0) = section_t0.take() {
                    let dt = section.as_ref().map(|s| s.0.config.dt()).unwrap_or(0.0);
                    played += last_t - t0 + dt;
                }
                let setup = Setup::from_header(&h)?;
                let targets = setup.targets(h.mode);
                section = Some((*h, targets));
            }
            LogLine::Tick(rec) => {
                let Some((header, targets)) = section.as_ref() else {
                    let msg = format!("line {}: tick before header", n + 1);
                    send(ServerMessage::error(&msg).to_json());
                    return Err(Error::Malformed(msg));
                };
                let t0 = *section_t0.get_or_insert(rec.t);
                last_t = rec.t;
                let due = start + Duration::from_secs_f64((played + rec.t - t0) / speed);
                sleep_until(due).await;
                let msg = ServerMessage::State(state_from_record(header, targets, &rec));
                if !send(msg.to_json()) {
                    break;
                }
                frames += 1;
            }
        }
    }
    if let Some(t0) = section_t0 {
        played += last_t - t0;
    }
    Ok(ReplayStats {
        frames,
        log_seconds: played,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}
