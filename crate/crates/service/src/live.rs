//! Live session driven by client input, independent of any transport.

use std::io::Write;

use wandbench_core::geometry::Pose;
use wandbench_core::mappings::MappingMode;
use wandbench_core::session::{HeldHand, LogLine, Setup, TickRecord, TrialRunner};
use wandbench_core::task::target_color;

use crate::protocol::{Control, StateMessage, TargetState, WandState, SCHEMA_VERSION};
use crate::Error;

/// Runs trials tick by tick from the latest hand pose. Trials advance
/// automatically; a mode ends after its last trial and waits for
/// `toggle_mode` or `start` (which restarts the mode at trial 1).
pub struct LiveSession {
    setup: Setup,
    mode: MappingMode,
    trial: usize,
    runner: Option<TrialRunner>,
    hand: HeldHand,
    input_stamp: Option<f64>,
    running: bool,
    /// Ticks logged in the current mode section.
    ticks: u64,
    last: Option<TickRecord>,
    log: Option<Box<dyn Write + Send>>,
    header_written: bool,
}

impl LiveSession {
    pub fn new(setup: Setup, log: Option<Box<dyn Write + Send>>) -> Self {
        let mode = setup.config.mode_order[0];
        let hand = HeldHand::new(setup.hand_start);
        Self {
            setup,
            mode,
            trial: 1,
            runner: None,
            hand,
            input_stamp: None,
            running: false,
            ticks: 0,
            last: None,
            log,
            header_written: false,
        }
    }

    pub fn setup(&self) -> &Setup {
        &self.setup
    }

    pub fn mode(&self) -> MappingMode {
        self.mode
    }

    pub fn trial(&self) -> usize {
        self.trial
    }

    pub fn running(&self) -> bool {
        self.running
    }

    pub fn hand(&self) -> Pose {
        self.hand.get()
    }

    /// Latest value wins.
    pub fn set_hand(&mut self, pose: Pose, stamp: Option<f64>) {
        self.hand.set(pose);
        if stamp.is_some() {
            self.input_stamp = stamp;
        }
    }

    pub fn control(&mut self, c: Control) -> Result<(), Error> {
        match c {
            Control::Start => {
                if self.runner.is_none() {
                    if self.trial > self.setup.config.trials_per_mode {
                        self.trial = 1;
                    }
                    self.begin_trial()?;
                }
                self.running = true;
            }
            Control::Pause => self.running = false,
            Control::NextTrial => {
                if let Some(mut r) = self.runner.take() {
                    r.abort();
                }
                self.trial += 1;
                if self.trial <= self.setup.config.trials_per_mode {
                    self.begin_trial()?;
                } else {
                    self.running = false;
                }
            }
            Control::ToggleMode => {
                self.runner = None;
                self.mode = self.mode.other();
                self.trial = 1;
                self.ticks = 0;
                self.header_written = false;
                self.last = None;
                if self.running {
                    self.begin_trial()?;
                }
            }
        }
        Ok(())
    }

    fn begin_trial(&mut self) -> Result<(), Error> {
        let runner = TrialRunner::new(&self.setup, self.mode, self.trial, self.setup.config.target_timeout)?
            .with_tick_offset(self.ticks);
        self.runner = Some(runner);
        Ok(())
    }

    fn write_line(&mut self, line: &LogLine) -> Result<(), Error> {
        if let Some(w) = self.log.as_mut() {
            serde_json::to_writer(&mut *w, line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Advances one tick when running. Returns the logged record.
    pub fn tick(&mut self) -> Result<Option<TickRecord>, Error> {
        if !self.running {
            return Ok(None);
        }
        let Some(runner) = self.runner.as_mut() else {
            return Ok(None);
        };
        let record = runner.step(&mut self.hand)?;
        let finished = runner.finished();
        if !self.header_written {
            let header = LogLine::Header(Box::new(self.setup.header(self.mode)));
            self.write_line(&header)?;
            self.header_written = true;
        }
        self.write_line(&LogLine::Tick(record.clone()))?;
        self.ticks += 1;
        self.last = Some(record.clone());
        if finished {
            self.trial += 1;
            self.runner = None;
            if self.trial <= self.setup.config.trials_per_mode {
                self.begin_trial()?;
            } else {
                self.running = false;
                self.flush()?;
            }
        }
        Ok(Some(record))
    }

    pub fn flush(&mut self) -> Result<(), Error> {
        if let Some(w) = self.log.as_mut() {
            w.flush()?;
        }
        Ok(())
    }

    /// Current scene, with desired-pose fields removed when visualization
    /// is off.
    pub fn state(&self) -> StateMessage {
        let vis = self.setup.config.visualization_on(self.trial.min(self.setup.config.trials_per_mode));
        let hand = self.hand.get();
        let mapping = self.setup.mapping(self.mode, self.trial.max(1));
        let desired = mapping.desired_pose(&hand);
        let robot = match (&self.runner, &self.last) {
            (Some(r), _) => r.robot().pose,
            (None, Some(rec)) => rec.robot,
            (None, None) => self.setup.effector_t0(self.mode),
        };
        let target = self.runner.as_ref().and_then(|r| {
            r.current_target().map(|t| TargetState {
                index: t.index,
                kind: t.kind,
                pose: t.effector_target.wire(),
                color: target_color(r.tracker()),
            })
        });
        let wand = (self.mode == MappingMode::Wand).then(|| WandState {
            length: (desired.translation - hand.translation).norm(),
            direction: self.setup.config.wand.direction.into_inner().into(),
        });
        let msg = StateMessage {
            version: SCHEMA_VERSION,
            t: self.last.as_ref().map(|r| r.t).unwrap_or(0.0),
            mode: self.mode,
            trial: self.trial,
            target_index: target.map(|t| t.index).unwrap_or(0),
            visualization_on: vis,
            running: self.running,
            hand: hand.wire(),
            robot: robot.wire(),
            desired: Some(desired.wire()),
            wand,
            target,
            input_stamp: self.input_stamp,
        };
        if vis {
            msg
        } else {
            msg.hide_desired()
        }
    }
}

impl Drop for LiveSession {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Mutex};
    use wandbench_core::session::{read_logs, replay_log, ExperimentConfig, InputConfig};

    #[derive(Clone, Default)]
    struct Shared(Arc<Mutex<Vec<u8>>>);
    impl Write for Shared {
        fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
            self.0.lock().unwrap().extend_from_slice(b);
            Ok(b.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    fn setup(off: Vec<usize>) -> Setup {
        Setup::new(ExperimentConfig {
            trials_per_mode: 2,
            visualization_off_trials: off,
            input: InputConfig::Live,
            target_timeout: Some(0.5),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn idle_until_started() {
        let mut s = LiveSession::new(setup(vec![]), None);
        assert!(s.tick().unwrap().is_none());
        s.control(Control::Start).unwrap();
        assert!(s.tick().unwrap().is_some());
        s.control(Control::Pause).unwrap();
        assert!(s.tick().unwrap().is_none());
    }

    #[test]
    fn desired_follows_mapping_of_input() {
        let st = setup(vec![]);
        let mapping = st.mapping(MappingMode::Direct, 1);
        let start = st.hand_start;
        let mut s = LiveSession::new(st, None);
        s.control(Control::Start).unwrap();
        for k in 0..50 {
            let hand = start.compose(&about_z(0.01 * k as f64));
            s.set_hand(hand, Some(k as f64));
            let rec = s.tick().unwrap().unwrap();
            assert_eq!(rec.desired, mapping.desired_pose(&hand));
        }
    }

    fn about_z(angle: f64) -> Pose {
        Pose::from_quaternion([0.0; 3], [(angle / 2.0).cos(), 0.0, 0.0, (angle / 2.0).sin()]).unwrap()
    }

    #[test]
    fn hidden_trial_state_and_toggle() {
        let mut s = LiveSession::new(setup(vec![1]), None);
        s.control(Control::Start).unwrap();
        s.tick().unwrap();
        let st = s.state();
        assert!(st.desired.is_none() && st.wand.is_none());
        s.control(Control::NextTrial).unwrap();
        s.tick().unwrap();
        assert!(s.state().desired.is_some());
        assert!(s.state().wand.is_none());
        s.control(Control::ToggleMode).unwrap();
        assert_eq!(s.mode(), MappingMode::Wand);
        s.tick().unwrap();
        let st = s.state();
        assert_eq!(st.trial, 1);
        assert!(st.desired.is_none(), "trial 1 is hidden in every mode");
    }

    #[test]
    fn live_log_replays() {
        let buf = Shared::default();
        let mut s = LiveSession::new(setup(vec![]), Some(Box::new(buf.clone())));
        s.control(Control::Start).unwrap();
        let start = s.hand();
        let mut n = 0;
        while s.running() && n < 100_000 {
            let wobble = Pose::from_quaternion([0.02 * (n as f64 * 0.01).sin(), 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]).unwrap();
            let hand = start.compose(&wobble);
            s.set_hand(hand, None);
            s.tick().unwrap();
            n += 1;
        }
        assert!(!s.running());
        drop(s);
        let bytes = buf.0.lock().unwrap().clone();
        let logs = read_logs(&bytes[..]).unwrap();
        assert_eq!(logs.len(), 1);
        assert_eq!(logs[0].trial_ranges().len(), 2);
        let report = replay_log(&logs[0]).unwrap();
        assert!(report.within(1e-9), "{report:?}");
    }
}
