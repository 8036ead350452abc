//! Fixed-step experiment loop and the session log format.
//!
//! Each tick, in order: adjudicate the dwell on the current robot pose, read
//! the hand pose, map it to the desired effector, log, then servo the robot.
//! Trials are independent (hand and robot are reset at trial start), so a
//! full experiment fans its trials out through [`crate::exec`] and stitches
//! the per-mode logs back together in protocol order.
//!
//! Log format: one JSON object per line. A `{"type":"header", ...}` line
//! opens each mode section and is followed by `{"type":"tick", ...}` lines.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_ordered, Execution};
use crate::geometry::{FrameRegistry, Pose, WirePose};
use crate::mappings::{MappingMode, MappingState, WandGeometry};
use crate::operator::{ReachPlan, ReachProfile};
use crate::robot::{servo_step, KinematicChain, RobotState, ServoConfig, ServoMode};
use crate::task::{generate_targets, DwellTracker, TargetSpec};

pub const LOG_VERSION: u32 = 1;
pub const DEFAULT_TARGET_TIMEOUT: f64 = 60.0;
const TIME_EPS: f64 = 1e-9;

/// Where the hand poses come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputConfig {
    Synthetic(ReachProfile),
    /// A session log whose hand records are replayed tick by tick.
    Recorded { path: PathBuf },
    /// Poses pushed by a remote client (see the service crate).
    Live,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig::Synthetic(ReachProfile::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode_order: Vec<MappingMode>,
    pub trials_per_mode: usize,
    /// 1-based trial numbers run without the desired-effector display.
    pub visualization_off_trials: Vec<usize>,
    pub wand: WandGeometry,
    /// Hand-to-desired-effector distance at trial start (both modes).
    pub initial_distance: f64,
    pub seed: u64,
    pub servo: ServoConfig,
    pub chain_file: Option<PathBuf>,
    pub frames: FrameRegistry,
    /// World pose of the hand at trial start; derived from the robot home
    /// pose when absent.
    pub hand_start: Option<Pose>,
    pub input: InputConfig,
    /// Per-target timeout in seconds for headless runs.
    pub target_timeout: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode_order: vec![MappingMode::Direct, MappingMode::Wand],
            trials_per_mode: 7,
            visualization_off_trials: vec![4, 6],
            wand: WandGeometry::default(),
            initial_distance: 0.45,
            seed: 0,
            servo: ServoConfig::default(),
            chain_file: None,
            frames: FrameRegistry::default(),
            hand_start: None,
            input: InputConfig::default(),
            target_timeout: Some(DEFAULT_TARGET_TIMEOUT),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode_order.is_empty() {
            return Err(Error::InvalidConfig("mode_order is empty".into()));
        }
        let mut seen = self.mode_order.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.mode_order.len() {
            return Err(Error::InvalidConfig("mode_order repeats a mode".into()));
        }
        if self.trials_per_mode == 0 {
            return Err(Error::InvalidConfig("trials_per_mode must be >= 1".into()));
        }
        if let Some(bad) = self
            .visualization_off_trials
            .iter()
            .find(|&&t| t == 0 || t > self.trials_per_mode)
        {
            return Err(Error::InvalidConfig(format!("visualization-off trial {bad} out of range")));
        }
        if !(self.initial_distance > 0.0) || !(self.wand.length > 0.0) {
            return Err(Error::InvalidConfig("distances must be > 0".into()));
        }
        if let Some(t) = self.target_timeout {
            if !(t > 0.0) {
                return Err(Error::InvalidConfig("target_timeout must be > 0".into()));
            }
        }
        self.servo.validate()
    }

    pub fn visualization_on(&self, trial: usize) -> bool {
        !self.visualization_off_trials.contains(&trial)
    }

    pub fn dt(&self) -> f64 {
        self.servo.dt
    }
}

/// Resolved geometry shared by every trial of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub config: ExperimentConfig,
    /// Chain with its base expressed in the world frame.
    pub chain: KinematicChain,
    pub hand_start: Pose,
}

impl Setup {
    /// Loads the chain named by the config (or the built-in arm).
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let chain = match &config.chain_file {
            Some(p) => KinematicChain::load(p)?,
            None => KinematicChain::default_7dof(),
        };
        Self::with_chain(config, chain)
    }

    /// `chain.base` is taken relative to the registry's robot base frame.
    pub fn with_chain(config: ExperimentConfig, mut chain: KinematicChain) -> Result<Self> {
        config.validate()?;
        chain.validate()?;
        chain.base = config
            .frames
            .world_to(FrameRegistry::ROBOT_BASE)
            .compose(&chain.base);
        let hand_start = match config.hand_start {
            Some(h) => h,
            None => {
                let home = chain.forward_kinematics(&chain.home())?;
                home.compose(&Self::offset_for(&config, MappingMode::Direct).invert())
            }
        };
        Ok(Self {
            config,
            chain,
            hand_start,
        })
    }

    /// Rebuilds a setup from a log header without touching the filesystem.
    pub fn from_header(header: &LogHeader) -> Result<Self> {
        header.config.validate()?;
        header.chain.validate()?;
        Ok(Self {
            config: header.config.clone(),
            chain: header.chain.clone(),
            hand_start: header.hand_start,
        })
    }

    fn offset_for(config: &ExperimentConfig, mode: MappingMode) -> Pose {
        let length = match mode {
            MappingMode::Direct => config.initial_distance,
            MappingMode::Wand => config.wand.length,
        };
        Pose::from_translation(config.wand.direction.into_inner() * length)
    }

    /// Desired effector pose at trial start.
    pub fn effector_t0(&self, mode: MappingMode) -> Pose {
        self.hand_start.compose(&Self::offset_for(&self.config, mode))
    }

    pub fn mapping(&self, mode: MappingMode, trial: usize) -> MappingState {
        MappingState::init(
            mode,
            self.hand_start,
            self.effector_t0(mode),
            self.config.visualization_on(trial),
        )
    }

    pub fn targets(&self, mode: MappingMode) -> Vec<TargetSpec> {
        generate_targets(self.config.seed, &self.mapping(mode, 1), &self.hand_start)
    }

    pub fn initial_robot(&self, mode: MappingMode) -> Result<RobotState> {
        match self.config.servo.mode {
            ServoMode::PoseServo => Ok(RobotState::at_pose(self.effector_t0(mode))),
            ServoMode::JointSpace => RobotState::at_joints(&self.chain, self.chain.home()),
        }
    }

    pub fn header(&self, mode: MappingMode) -> LogHeader {
        LogHeader {
            version: LOG_VERSION,
            mode,
            seed: self.config.seed,
            chain_checksum: self.chain.checksum(),
            wand: self.config.wand,
            hand_start: self.hand_start,
            effector_t0: self.effector_t0(mode),
            config: self.config.clone(),
            chain: self.chain.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    TrialStart { trial: usize, mode: MappingMode },
    TrialEnd { trial: usize },
    TargetShown { target: usize },
    TargetAchieved { target: usize },
    TargetTimeout { target: usize },
    VisualizationOff,
    VisualizationOn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub version: u32,
    pub mode: MappingMode,
    pub seed: u64,
    pub chain_checksum: String,
    pub wand: WandGeometry,
    pub hand_start: Pose,
    pub effector_t0: Pose,
    pub config: ExperimentConfig,
    pub chain: KinematicChain,
}

/// One tick. `P` is [`Pose`] for computation or [`WirePose`] to keep the
/// serialized numbers untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord<P = Pose> {
    pub t: f64,
    pub trial: usize,
    pub target: usize,
    pub inside: bool,
    pub visualization: bool,
    pub hand: P,
    pub desired: P,
    pub robot: P,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<Event>,
}

pub type WireTickRecord = TickRecord<WirePose>;

impl TickRecord<Pose> {
    pub fn to_wire(&self) -> WireTickRecord {
        TickRecord {
            t: self.t,
            trial: self.trial,
            target: self.target,
            inside: self.inside,
            visualization: self.visualization,
            hand: self.hand.wire(),
            desired: self.desired.wire(),
            robot: self.robot.wire(),
            events: self.events.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogLine<P = Pose> {
    Header(Box<LogHeader>),
    Tick(TickRecord<P>),
}

/// Header plus the ticks of every trial of one mapping mode.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub header: LogHeader,
    pub records: Vec<TickRecord>,
}

impl SessionLog {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        write_line(&mut w, &LogLine::<Pose>::Header(Box::new(self.header.clone())))?;
        for r in &self.records {
            write_line(&mut w, &LogLine::Tick(r.clone()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(f))
    }

    /// Contiguous record ranges per trial, in log order.
    pub fn trial_ranges(&self) -> Vec<(usize, Range<usize>)> {
        let mut out: Vec<(usize, Range<usize>)> = Vec::new();
        for (i, r) in self.records.iter().enumerate() {
            match out.last_mut() {
                Some((trial, range)) if *trial == r.trial && range.end == i => range.end = i + 1,
                _ => out.push((r.trial, i..i + 1)),
            }
        }
        out
    }
}

fn write_line<W: Write, T: Serialize>(w: &mut W, line: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, line)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Parses one log line.
pub fn parse_line<P: for<'de> Deserialize<'de>>(line: &str) -> Result<LogLine<P>> {
    serde_json::from_str(line).map_err(|e| Error::Log(format!("{e}: {}", truncate(line))))
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(80) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Reads every mode section of a log stream.
pub fn read_logs<R: BufRead>(r: R) -> Result<Vec<SessionLog>> {
    let mut logs: Vec<SessionLog> = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line::<Pose>(&line).map_err(|e| Error::Log(format!("line {}: {e}", n + 1)))? {
            LogLine::Header(h) => {
                if h.version != LOG_VERSION {
                    return Err(Error::Log(format!("unsupported log version {}", h.version)));
                }
                logs.push(SessionLog {
                    header: *h,
                    records: Vec::new(),
                })
            }
            LogLine::Tick(t) => match logs.last_mut() {
                Some(l) => l.records.push(t),
                None => return Err(Error::Log(format!("line {}: tick before header", n + 1))),
            },
        }
    }
    Ok(logs)
}

pub fn load_logs(path: &Path) -> Result<Vec<SessionLog>> {
    let f = std::fs::File::open(path)?;
    read_logs(std::io::BufReader::new(f))
}

/// What a hand source sees each tick.
#[derive(Debug, Clone, Copy)]
pub struct TickContext<'a> {
    /// Tick index within the trial.
    pub tick: u64,
    /// Seconds since trial start.
    pub t: f64,
    pub trial: usize,
    pub target: &'a TargetSpec,
    /// Trial time at which `target` was shown.
    pub shown_at: f64,
    pub previous_hand: &'a Pose,
}

pub trait HandSource {
    fn hand_pose(&mut self, ctx: &TickContext<'_>) -> Pose;
}

/// Synthetic operator: a fresh two-phase reach toward each new target's hand
/// endpoint, then holds still.
#[derive(Debug, Clone)]
pub struct SyntheticOperator {
    profile: ReachProfile,
    seed: u64,
    active: Option<(usize, ReachPlan)>,
}

impl SyntheticOperator {
    pub fn new(profile: ReachProfile, seed: u64) -> Self {
        Self {
            profile,
            seed,
            active: None,
        }
    }
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl HandSource for SyntheticOperator {
    fn hand_pose(&mut self, ctx: &TickContext<'_>) -> Pose {
        let stale = self.active.as_ref().is_none_or(|(i, _)| *i != ctx.target.index);
        if stale {
            let noise_seed = mix(self.seed ^ mix(((ctx.trial as u64) << 32) | ctx.target.index as u64));
            let plan = self
                .profile
                .plan(*ctx.previous_hand, ctx.target.hand_endpoint, noise_seed)
                .expect("reach profile validated with the config");
            self.active = Some((ctx.target.index, plan));
        }
        let (_, plan) = self.active.as_ref().expect("plan set above");
        plan.pose_at(ctx.t - ctx.shown_at)
    }
}

/// Replays recorded hand poses by tick index, holding the last one.
#[derive(Debug, Clone)]
pub struct RecordedHand {
    poses: Vec<Pose>,
}

impl RecordedHand {
    pub fn new(poses: Vec<Pose>) -> Self {
        Self { poses }
    }
}

impl HandSource for RecordedHand {
    fn hand_pose(&mut self, ctx: &TickContext<'_>) -> Pose {
        let i = ctx.tick as usize;
        self.poses
            .get(i)
            .or(self.poses.last())
            .copied()
            .unwrap_or(*ctx.previous_hand)
    }
}

/// Sample-and-hold mailbox for live input.
#[derive(Debug, Clone)]
pub struct HeldHand {
    latest: Pose,
}

impl HeldHand {
    pub fn new(initial: Pose) -> Self {
        Self { latest: initial }
    }

    pub fn set(&mut self, pose: Pose) {
        self.latest = pose;
    }

    pub fn get(&self) -> Pose {
        self.latest
    }
}

impl HandSource for HeldHand {
    fn hand_pose(&mut self, _ctx: &TickContext<'_>) -> Pose {
        self.latest
    }
}

/// Outcome of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub mode: MappingMode,
    pub trial: usize,
    pub visualization_on: bool,
    /// Seconds from target shown to achieved; `None` on timeout.
    pub durations: Vec<Option<f64>>,
    /// Record indices of this trial inside its mode's log.
    pub records: Range<usize>,
    /// Servo steps with an active joint limit.
    pub limit_hits: usize,
}

impl TrialResult {
    pub fn achieved(&self) -> usize {
        self.durations.iter().filter(|d| d.is_some()).count()
    }
}

/// Steps one trial tick by tick.
#[derive(Debug, Clone)]
pub struct TrialRunner {
    mode: MappingMode,
    trial: usize,
    mapping: MappingState,
    targets: Vec<TargetSpec>,
    chain: KinematicChain,
    servo: ServoConfig,
    robot: RobotState,
    tracker: DwellTracker,
    target_idx: usize,
    shown_tick: u64,
    tick: u64,
    tick_offset: u64,
    hand: Pose,
    pending: Vec<Event>,
    durations: Vec<Option<f64>>,
    timeout: Option<f64>,
    finished: bool,
    limit_hits: usize,
}

impl TrialRunner {
    pub fn new(setup: &Setup, mode: MappingMode, trial: usize, timeout: Option<f64>) -> Result<Self> {
        let mapping = setup.mapping(mode, trial);
        let targets = setup.targets(mode);
        let mut pending = vec![Event::TrialStart { trial, mode }];
        if !mapping.visualization_on() {
            pending.push(Event::VisualizationOff);
        }
        pending.push(Event::TargetShown { target: 0 });
        Ok(Self {
            mode,
            trial,
            mapping,
            durations: vec![None; targets.len()],
            targets,
            chain: setup.chain.clone(),
            servo: setup.config.servo,
            robot: setup.initial_robot(mode)?,
            tracker: DwellTracker::new(),
            target_idx: 0,
            shown_tick: 0,
            tick: 0,
            tick_offset: 0,
            hand: setup.hand_start,
            pending,
            timeout,
            finished: false,
            limit_hits: 0,
        })
    }

    /// Shifts logged timestamps; trial-local timing is unaffected.
    pub fn with_tick_offset(mut self, offset: u64) -> Self {
        self.tick_offset = offset;
        self
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    pub fn mapping(&self) -> &MappingState {
        &self.mapping
    }

    pub fn mode(&self) -> MappingMode {
        self.mode
    }

    pub fn trial(&self) -> usize {
        self.trial
    }

    pub fn targets(&self) -> &[TargetSpec] {
        &self.targets
    }

    pub fn current_target(&self) -> Option<&TargetSpec> {
        self.targets.get(self.target_idx)
    }

    pub fn tracker(&self) -> &DwellTracker {
        &self.tracker
    }

    pub fn robot(&self) -> &RobotState {
        &self.robot
    }

    pub fn ticks(&self) -> u64 {
        self.tick
    }

    pub fn durations(&self) -> &[Option<f64>] {
        &self.durations
    }

    pub fn limit_hits(&self) -> usize {
        self.limit_hits
    }

    /// Ends the trial early, marking remaining targets unachieved.
    pub fn abort(&mut self) -> Vec<Event> {
        if self.finished {
            return Vec::new();
        }
        self.finished = true;
        let mut ev = vec![Event::TrialEnd { trial: self.trial }];
        if !self.mapping.visualization_on() {
            ev.push(Event::VisualizationOn);
        }
        ev
    }

    pub fn step(&mut self, source: &mut dyn HandSource) -> Result<TickRecord> {
        if self.finished {
            return Err(Error::InvalidArgument("trial already finished".into()));
        }
        let dt = self.servo.dt;
        let t = self.tick as f64 * dt;
        let shown_at = self.shown_tick as f64 * dt;
        let mut events = std::mem::take(&mut self.pending);
        let idx = self.target_idx;
        let target = &self.targets[idx];

        self.tracker = self.tracker.update(&self.robot.pose, target, t)?;
        let inside = self.tracker.inside();
        let mut advance = false;
        if self.tracker.achieved {
            events.push(Event::TargetAchieved { target: idx });
            self.durations[idx] = Some(t - shown_at);
            advance = true;
        } else if self.timeout.is_some_and(|limit| t - shown_at >= limit - TIME_EPS) {
            events.push(Event::TargetTimeout { target: idx });
            advance = true;
        }

        let ctx = TickContext {
            tick: self.tick,
            t,
            trial: self.trial,
            target,
            shown_at,
            previous_hand: &self.hand,
        };
        let hand = source.hand_pose(&ctx);
        let desired = self.mapping.desired_pose(&hand);
        self.hand = hand;

        let mut record = TickRecord {
            t: (self.tick_offset + self.tick) as f64 * dt,
            trial: self.trial,
            target: idx,
            inside,
            visualization: self.mapping.visualization_on(),
            hand,
            desired,
            robot: self.robot.pose,
            events,
        };

        if advance {
            self.target_idx += 1;
            if self.target_idx == self.targets.len() {
                record.events.extend(self.abort());
            } else {
                self.pending.push(Event::TargetShown {
                    target: self.target_idx,
                });
                self.tracker = DwellTracker::new();
                self.shown_tick = self.tick + 1;
            }
        }
        if !self.finished {
            let step = servo_step(&self.chain, &self.robot, &desired, &self.servo)?;
            if step.status.limit_active() {
                self.limit_hits += 1;
            }
            self.robot = step.state;
        }
        self.tick += 1;
        Ok(record)
    }

    pub fn result(&self, records: Range<usize>) -> TrialResult {
        TrialResult {
            mode: self.mode,
            trial: self.trial,
            visualization_on: self.mapping.visualization_on(),
            durations: self.durations.clone(),
            records,
            limit_hits: self.limit_hits,
        }
    }
}

fn headless_timeout(setup: &Setup) -> Result<f64> {
    setup
        .config
        .target_timeout
        .ok_or_else(|| Error::InvalidConfig("headless runs need a target_timeout".into()))
}

/// Runs one trial to completion. Record timestamps start at 0.
pub fn run_trial(
    setup: &Setup,
    mode: MappingMode,
    trial: usize,
    source: &mut dyn HandSource,
) -> Result<(Vec<TickRecord>, TrialResult)> {
    let timeout = headless_timeout(setup)?;
    let mut runner = TrialRunner::new(setup, mode, trial, Some(timeout))?;
    let mut records = Vec::new();
    while !runner.finished() {
        records.push(runner.step(source)?);
    }
    let result = runner.result(0..records.len());
    Ok((records, result))
}

/// Hand poses of a recorded session, grouped by trial.
#[derive(Debug, Clone, Default)]
pub struct RecordedHands {
    by_mode: BTreeMap<MappingMode, BTreeMap<usize, Vec<Pose>>>,
}

impl RecordedHands {
    pub fn from_logs(logs: &[SessionLog]) -> Self {
        let mut by_mode: BTreeMap<MappingMode, BTreeMap<usize, Vec<Pose>>> = BTreeMap::new();
        for log in logs {
            let trials = by_mode.entry(log.header.mode).or_default();
            for r in &log.records {
                trials.entry(r.trial).or_default().push(r.hand);
            }
        }
        Self { by_mode }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_logs(&load_logs(path)?))
    }

    /// Poses for `(mode, trial)`, falling back to any mode that recorded
    /// the trial.
    pub fn trial(&self, mode: MappingMode, trial: usize) -> Vec<Pose> {
        self.by_mode
            .get(&mode)
            .and_then(|t| t.get(&trial))
            .or_else(|| self.by_mode.values().find_map(|t| t.get(&trial)))
            .cloned()
            .unwrap_or_default()
    }
}

/// Full protocol output.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    /// One log per mode, in `mode_order`.
    pub logs: Vec<SessionLog>,
    pub results: Vec<TrialResult>,
}

impl Experiment {
    pub fn attempted(&self) -> usize {
        self.results.iter().map(|r| r.durations.len()).sum()
    }

    pub fn achieved(&self) -> usize {
        self.results.iter().map(TrialResult::achieved).sum()
    }

    pub fn log(&self, mode: MappingMode) -> Option<&SessionLog> {
        self.logs.iter().find(|l| l.header.mode == mode)
    }
}

/// Runs every mode and trial of the protocol.
pub fn run_experiment(setup: &Setup, exec: Execution) -> Result<Experiment> {
    let recorded = match &setup.config.input {
        InputConfig::Recorded { path } => Some(RecordedHands::load(path)?),
        InputConfig::Live => {
            return Err(Error::InvalidConfig("live input cannot run headless".into()))
        }
        InputConfig::Synthetic(p) => {
            p.plan(Pose::identity(), Pose::identity(), 0)?;
            None
        }
    };
    headless_timeout(setup)?;
    let jobs: Vec<(MappingMode, usize)> = setup
        .config
        .mode_order
        .iter()
        .flat_map(|&m| (1..=setup.config.trials_per_mode).map(move |t| (m, t)))
        .collect();

    let outputs = map_ordered(exec, &jobs, |&(mode, trial)| {
        let mut source: Box<dyn HandSource> = match (&setup.config.input, &recorded) {
            (_, Some(rec)) => Box::new(RecordedHand::new(rec.trial(mode, trial))),
            (InputConfig::Synthetic(p), None) => Box::new(SyntheticOperator::new(*p, setup.config.seed)),
            _ => unreachable!("input kind checked above"),
        };
        run_trial(setup, mode, trial, source.as_mut())
    });

    let dt = setup.config.dt();
    let mut logs: Vec<SessionLog> = Vec::new();
    let mut results = Vec::with_capacity(jobs.len());
    for (&(mode, _), out) in jobs.iter().zip(outputs) {
        let (records, mut result) = out?;
        if logs.last().is_none_or(|l| l.header.mode != mode) {
            logs.push(SessionLog {
                header: setup.header(mode),
                records: Vec::new(),
            });
        }
        let log = logs.last_mut().expect("pushed above");
        let start = log.records.len();
        for (i, mut r) in records.into_iter().enumerate() {
            r.t = (start + i) as f64 * dt;
            log.records.push(r);
        }
        result.records = start..log.records.len();
        results.push(result);
    }
    Ok(Experiment { logs, results })
}

/// Worst deviations found by [`replay_log`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ReplayReport {
    pub ticks: usize,
    pub max_desired_dev: f64,
    pub max_robot_dev: f64,
    /// Ticks whose events or target index differ, plus any length mismatch.
    pub mismatches: usize,
}

impl ReplayReport {
    pub fn within(&self, tol: f64) -> bool {
        self.mismatches == 0 && self.max_desired_dev <= tol && self.max_robot_dev <= tol
    }
}

/// Feeds a log's hand records back through mapping, servo and dwell logic
/// and compares against the logged desired and robot streams.
pub fn replay_log(log: &SessionLog) -> Result<ReplayReport> {
    let setup = Setup::from_header(&log.header)?;
    let mode = log.header.mode;
    let timeout = log.header.config.target_timeout;
    let mut report = ReplayReport::default();
    for (trial, range) in log.trial_ranges() {
        let logged = &log.records[range.clone()];
        let mut source = RecordedHand::new(logged.iter().map(|r| r.hand).collect());
        let first_tick = (logged[0].t / setup.config.dt()).round() as u64;
        let mut runner = TrialRunner::new(&setup, mode, trial, timeout)?.with_tick_offset(first_tick);
        for rec in logged {
            if runner.finished() {
                report.mismatches += 1;
                continue;
            }
            let mine = runner.step(&mut source)?;
            report.ticks += 1;
            report.max_desired_dev = report.max_desired_dev.max(mine.desired.max_abs_diff(&rec.desired));
            report.max_robot_dev = report.max_robot_dev.max(mine.robot.max_abs_diff(&rec.robot));
            if mine.events != rec.events || mine.target != rec.target || mine.inside != rec.inside {
                report.mismatches += 1;
            }
        }
        if !runner.finished() {
            report.mismatches += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TargetKind;

    fn setup() -> Setup {
        Setup::new(ExperimentConfig::default()).unwrap()
    }

    /// Never moves the hand from the start pose.
    struct Frozen(Pose);
    impl HandSource for Frozen {
        fn hand_pose(&mut self, _: &TickContext<'_>) -> Pose {
            self.0
        }
    }

    #[test]
    fn default_setup_places_hand_behind_effector() {
        let s = setup();
        let home = s.chain.forward_kinematics(&s.chain.home()).unwrap();
        for mode in MappingMode::ALL {
            assert!(s.effector_t0(mode).max_abs_diff(&home) < 1e-12);
        }
        let d = (s.effector_t0(MappingMode::Wand).translation - s.hand_start.translation).norm();
        assert!((d - 0.45).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::default();
        c.visualization_off_trials = vec![8];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.mode_order = vec![MappingMode::Wand, MappingMode::Wand];
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn config_toml_round_trip() {
        let mut c = ExperimentConfig::default();
        c.seed = 17;
        c.mode_order = vec![MappingMode::Wand, MappingMode::Direct];
        let text = toml::to_string(&c).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, 17);
        assert_eq!(back.mode_order, c.mode_order);
        let partial: ExperimentConfig = toml::from_str("seed = 3\n[servo]\nk = 0.8\n").unwrap();
        assert_eq!(partial.servo.k, 0.8);
        assert_eq!(partial.servo.dt, 0.01);
        assert_eq!(partial.trials_per_mode, 7);
    }

    #[test]
    fn frozen_input_times_out_outer_then_achieves_central() {
        let mut cfg = ExperimentConfig::default();
        cfg.target_timeout = Some(3.0);
        let s = Setup::new(cfg).unwrap();
        let mut runner = TrialRunner::new(&s, MappingMode::Direct, 1, Some(3.0)).unwrap();
        let mut src = Frozen(s.hand_start);
        let mut records = Vec::new();
        while records.len() < 1000 && !runner.finished() {
            records.push(runner.step(&mut src).unwrap());
        }
        assert_eq!(runner.targets()[0].kind, TargetKind::Outer);
        assert_eq!(runner.targets()[1].kind, TargetKind::Central);
        let timeout_t = records
            .iter()
            .find(|r| r.events.contains(&Event::TargetTimeout { target: 0 }))
            .unwrap()
            .t;
        assert!((timeout_t - 3.0).abs() < 1e-9);
        let shown = records
            .iter()
            .find(|r| r.events.contains(&Event::TargetShown { target: 1 }))
            .unwrap()
            .t;
        let achieved = records
            .iter()
            .find(|r| r.events.contains(&Event::TargetAchieved { target: 1 }))
            .unwrap()
            .t;
        assert!((achieved - shown - 1.0).abs() < 1e-9, "{shown} -> {achieved}");
        assert_eq!(runner.durations()[0], None);
        assert!((runner.durations()[1].unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_trial_is_complete_and_consistent() {
        let s = setup();
        let mut op = SyntheticOperator::new(ReachProfile::default(), s.config.seed);
        let (records, result) = run_trial(&s, MappingMode::Wand, 1, &mut op).unwrap();
        assert_eq!(result.achieved(), 30);
        for w in records.windows(2) {
            assert!(w[1].t > w[0].t);
            assert!((w[1].t - w[0].t - 0.01).abs() < 1e-9);
        }
        // every achievement preceded by >= 1 s of inside records
        for (i, r) in records.iter().enumerate() {
            if r.events.iter().any(|e| matches!(e, Event::TargetAchieved { .. })) {
                let inside: usize = records[..=i].iter().rev().take_while(|x| x.inside).count();
                assert!(inside as f64 * 0.01 >= 1.0, "only {inside} inside ticks");
            }
        }
        // independent recomputation of the wand law
        let m = s.mapping(MappingMode::Wand, 1);
        let tip = s.hand_start.invert().compose(&s.effector_t0(MappingMode::Wand));
        for r in records.iter().step_by(97) {
            let expect_rot = r.hand.rotation * tip.rotation;
            let expect_t = r.hand.rotation * tip.translation + r.hand.translation;
            assert!((r.desired.rotation - expect_rot).abs().max() < 1e-12);
            assert!((r.desired.translation - expect_t).abs().max() < 1e-12);
            assert_eq!(m.desired_pose(&r.hand), r.desired);
        }
    }

    #[test]
    fn log_round_trip_and_replay() {
        let mut cfg = ExperimentConfig::default();
        cfg.trials_per_mode = 1;
        cfg.visualization_off_trials.clear();
        let s = Setup::new(cfg).unwrap();
        let exp = run_experiment(&s, Execution::Sequential).unwrap();
        assert_eq!(exp.logs.len(), 2);
        let bytes = exp.logs[0].to_jsonl_bytes().unwrap();
        let back = read_logs(&bytes[..]).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].records.len(), exp.logs[0].records.len());
        let report = replay_log(&back[0]).unwrap();
        assert!(report.within(1e-9), "{report:?}");
    }

    #[test]
    fn corrupt_log_rejected() {
        let text = "{\"type\":\"tick\",\"t\":0}\n";
        assert!(read_logs(text.as_bytes()).is_err());
    }
}
