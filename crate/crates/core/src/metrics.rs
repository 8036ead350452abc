//! Trajectory metrics over session logs.
//!
//! The unit of analysis is a [`ReachSlice`]: the samples of one target from
//! the tick it was shown up to the tick it was achieved. Progress in a
//! channel is `1 - d(t)/d(0)` where `d` is the error to the target in that
//! channel (metres, or geodesic radians). It can exceed 1 transiently and is
//! never clamped.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::exec::{map_ordered, Execution};
use crate::geometry::{log_so3, pose_distance, Pose};
use crate::mappings::MappingMode;
use crate::session::{Event, SessionLog, Setup};
use crate::task::{TargetKind, TargetSpec};

/// Threshold crossed by [`response_time_80`].
pub const RESPONSE_LEVEL: f64 = 0.8;
/// Moving-average window used before segmentation, in seconds.
pub const SMOOTHING_WINDOW: f64 = 0.15;
/// A local minimum only splits the reach if the speed later rises by more
/// than this fraction of the peak.
pub const SPLIT_PROMINENCE: f64 = 0.05;
pub const GRID_POINTS: usize = 101;
/// Largest sample size for the exact signed-rank distribution.
pub const EXACT_MAX_N: usize = 12;
const DEGENERATE_EPS: f64 = 1e-12;

/// One target's samples, `t` measured from the moment it was shown.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachSlice {
    pub mode: MappingMode,
    pub trial: usize,
    pub visualization: bool,
    pub target: TargetSpec,
    pub t: Vec<f64>,
    pub hand: Vec<Pose>,
    pub desired: Vec<Pose>,
    pub robot: Vec<Pose>,
    pub achieved: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subject {
    Hand,
    /// The desired (virtual) effector.
    Effector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Ballistic,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Translation,
    Rotation,
}

impl ReachSlice {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.t.last().copied().unwrap_or(0.0) - self.t.first().copied().unwrap_or(0.0)
    }

    pub fn poses(&self, subject: Subject) -> &[Pose] {
        match subject {
            Subject::Hand => &self.hand,
            Subject::Effector => &self.desired,
        }
    }

    /// Goal of `subject`: the hand endpoint or the effector target.
    pub fn goal(&self, subject: Subject) -> &Pose {
        match subject {
            Subject::Hand => &self.target.hand_endpoint,
            Subject::Effector => &self.target.effector_target,
        }
    }

    /// Per-sample (translation, rotation) error to the goal.
    pub fn errors(&self, subject: Subject) -> Vec<(f64, f64)> {
        let goal = self.goal(subject);
        self.poses(subject).iter().map(|p| pose_distance(p, goal)).collect()
    }

    fn check(&self) -> Result<()> {
        let n = self.t.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty reach slice".into()));
        }
        if self.hand.len() != n || self.desired.len() != n || self.robot.len() != n {
            return Err(Error::InvalidArgument("reach slice arrays differ in length".into()));
        }
        Ok(())
    }
}

/// Splits every log into per-target slices, in log order.
pub fn slices_from_log(log: &SessionLog) -> Result<Vec<ReachSlice>> {
    let setup = Setup::from_header(&log.header)?;
    let mode = log.header.mode;
    let targets = setup.targets(mode);
    let mut out = Vec::new();
    for (trial, range) in log.trial_ranges() {
        let recs = &log.records[range];
        let mut start = 0;
        while start < recs.len() {
            let idx = recs[start].target;
            let mut end = start;
            while end + 1 < recs.len() && recs[end + 1].target == idx {
                end += 1;
            }
            let span = &recs[start..=end];
            let target = targets
                .get(idx)
                .cloned()
                .ok_or_else(|| Error::Log(format!("target index {idx} out of range")))?;
            let achieved_at = span
                .iter()
                .position(|r| r.events.contains(&Event::TargetAchieved { target: idx }));
            let span = match achieved_at {
                Some(k) => &span[..=k],
                None => span,
            };
            let t0 = span[0].t;
            out.push(ReachSlice {
                mode,
                trial,
                visualization: span[0].visualization,
                target,
                t: span.iter().map(|r| r.t - t0).collect(),
                hand: span.iter().map(|r| r.hand).collect(),
                desired: span.iter().map(|r| r.desired).collect(),
                robot: span.iter().map(|r| r.robot).collect(),
                achieved: achieved_at.is_some(),
            });
            start = end + 1;
        }
    }
    Ok(out)
}

/// Seconds from shown to achieved; `None` for an unachieved slice.
pub fn time_per_target(slice: &ReachSlice) -> Option<f64> {
    (slice.achieved && !slice.is_empty()).then(|| slice.duration())
}

/// Overshoot beyond tolerance after first entry, in percent of the
/// tolerance; `None` for a channel that never entered.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Overshoot {
    pub translation: Option<f64>,
    pub rotation: Option<f64>,
}

fn overshoot_channel(d: impl Iterator<Item = f64>, tol: f64) -> Option<f64> {
    let mut entered = false;
    let mut peak = f64::NEG_INFINITY;
    for x in d {
        if entered {
            peak = peak.max(x);
        } else if x <= tol {
            entered = true;
        }
    }
    entered.then(|| (peak - tol).max(0.0) / tol * 100.0)
}

/// Measured on the desired effector.
pub fn overshoot_percent(slice: &ReachSlice) -> Overshoot {
    let e = slice.errors(Subject::Effector);
    Overshoot {
        translation: overshoot_channel(e.iter().map(|x| x.0), slice.target.tol_translation),
        rotation: overshoot_channel(e.iter().map(|x| x.1), slice.target.tol_rotation),
    }
}

/// Error-based progress per channel; a channel with zero initial error is
/// identically 1.
pub fn progress(errors: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let Some(&(d0t, d0r)) = errors.first() else {
        return Vec::new();
    };
    let p = |d: f64, d0: f64| if d0 > DEGENERATE_EPS { 1.0 - d / d0 } else { 1.0 };
    errors.iter().map(|&(dt, dr)| (p(dt, d0t), p(dr, d0r))).collect()
}

/// First time after which `p` stays at or above `level`, interpolated
/// linearly at the crossing.
fn hold_time(t: &[f64], p: &[f64], level: f64) -> f64 {
    match p.iter().rposition(|&x| x < level) {
        None => t[0],
        Some(i) if i + 1 == p.len() => t[i],
        Some(i) => {
            let (a, b) = (p[i], p[i + 1]);
            let f = if b > a { (level - a) / (b - a) } else { 1.0 };
            t[i] + f * (t[i + 1] - t[i])
        }
    }
}

/// Time at which both channels of the desired effector reach and keep 80%
/// progress.
pub fn response_time_80(slice: &ReachSlice) -> Option<f64> {
    if !slice.achieved || slice.check().is_err() {
        return None;
    }
    let p = progress(&slice.errors(Subject::Effector));
    let pt: Vec<f64> = p.iter().map(|x| x.0).collect();
    let pr: Vec<f64> = p.iter().map(|x| x.1).collect();
    let t0 = slice.t[0];
    Some(hold_time(&slice.t, &pt, RESPONSE_LEVEL).max(hold_time(&slice.t, &pr, RESPONSE_LEVEL)) - t0)
}

/// Combined normalized speed `|v|/D_T + |w|/D_R` by central differences.
/// A channel with zero net displacement is left out.
pub fn combined_speed(t: &[f64], poses: &[Pose]) -> Vec<f64> {
    let n = poses.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let (dt_total, dr_total) = pose_distance(&poses[0], &poses[n - 1]);
    (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            let h = t[b] - t[a];
            if h <= 0.0 {
                return 0.0;
            }
            let mut v = 0.0;
            if dt_total > DEGENERATE_EPS {
                v += (poses[b].translation - poses[a].translation).norm() / h / dt_total;
            }
            if dr_total > DEGENERATE_EPS {
                v += log_so3(&(poses[b].rotation * poses[a].rotation.transpose())).norm() / h / dr_total;
            }
            v
        })
        .collect()
}

/// Centered moving average with `half` samples on each side, shrinking at
/// the ends.
pub fn moving_average(x: &[f64], half: usize) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(half), (i + half).min(n - 1));
            x[a..=b].iter().sum::<f64>() / (b - a + 1) as f64
        })
        .collect()
}

/// Index of the first local minimum after the global peak that is followed
/// by a rise of more than `prominence * peak`.
fn split_index(v: &[f64], prominence: f64) -> Option<usize> {
    let (peak_i, peak) = v
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, x)| if x > best.1 { (i, x) } else { best });
    if !(peak > 0.0) {
        return None;
    }
    let rise = prominence * peak;
    let mut i = peak_i + 1;
    while i + 1 < v.len() {
        if v[i] <= v[i - 1] && v[i] < v[i + 1] {
            // extend over a flat bottom to its centre
            let mut j = i;
            while j > peak_i + 1 && v[j - 1] == v[i] {
                j -= 1;
            }
            let later_max = v[i + 1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if later_max - v[i] > rise {
                return Some((i + j) / 2);
            }
        }
        i += 1;
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    /// Seconds from the slice start.
    pub split: f64,
    /// True when no interior minimum was found and the 50% fallback used.
    pub fallback: bool,
}

/// Ballistic/adjust split of the hand motion.
pub fn segment_ballistic(slice: &ReachSlice) -> Result<Segmentation> {
    slice.check()?;
    segment_poses(&slice.t, &slice.hand)
}

pub fn segment_poses(t: &[f64], poses: &[Pose]) -> Result<Segmentation> {
    if t.len() < 2 || t.len() != poses.len() {
        return Err(Error::InvalidArgument("segmentation needs at least two samples".into()));
    }
    let v = combined_speed(t, poses);
    let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
    let half = if dt > 0.0 { ((SMOOTHING_WINDOW / dt).round() as usize) / 2 } else { 0 };
    let smooth = moving_average(&v, half);
    Ok(match split_index(&smooth, SPLIT_PROMINENCE) {
        Some(i) => Segmentation {
            split: t[i] - t[0],
            fallback: false,
        },
        None => Segmentation {
            split: 0.5 * (t[t.len() - 1] - t[0]),
            fallback: true,
        },
    })
}

/// Linear interpolation of `y(x)` at `xq`; `x` ascending.
fn interp(x: &[f64], y: &[f64], xq: f64) -> f64 {
    if xq <= x[0] {
        return y[0];
    }
    let n = x.len();
    if xq >= x[n - 1] {
        return y[n - 1];
    }
    let j = x.partition_point(|&v| v <= xq);
    let (x0, x1) = (x[j - 1], x[j]);
    if x1 == x0 {
        return y[j];
    }
    y[j - 1] + (y[j] - y[j - 1]) * (xq - x0) / (x1 - x0)
}

pub fn unit_grid() -> Vec<f64> {
    (0..GRID_POINTS).map(|i| i as f64 / (GRID_POINTS - 1) as f64).collect()
}

/// Hand progress curves of one slice on the unit time grid.
pub fn normalized_progress(slice: &ReachSlice) -> Result<(Vec<f64>, Vec<f64>)> {
    slice.check()?;
    let p = progress(&slice.errors(Subject::Hand));
    let span = slice.duration();
    let s: Vec<f64> = slice
        .t
        .iter()
        .map(|&t| if span > 0.0 { (t - slice.t[0]) / span } else { 0.0 })
        .collect();
    let pt: Vec<f64> = p.iter().map(|x| x.0).collect();
    let pr: Vec<f64> = p.iter().map(|x| x.1).collect();
    let grid = unit_grid();
    Ok((
        grid.iter().map(|&g| interp(&s, &pt, g)).collect(),
        grid.iter().map(|&g| interp(&s, &pr, g)).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandCurve {
    pub median: Vec<f64>,
    pub sd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedCurves {
    pub s: Vec<f64>,
    pub translation: BandCurve,
    pub rotation: BandCurve,
    pub count: usize,
}

/// Translation and rotation progress on the unit grid.
type Curves = (Vec<f64>, Vec<f64>);

/// Pointwise median and standard deviation of the hand progress curves.
pub fn normalized_curves(slices: &[ReachSlice], exec: Execution) -> Result<NormalizedCurves> {
    if slices.is_empty() {
        return Err(Error::InvalidArgument("no slices".into()));
    }
    let curves = map_ordered(exec, slices, normalized_progress)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let band = |pick: fn(&Curves) -> &Vec<f64>| {
        let mut median = Vec::with_capacity(GRID_POINTS);
        let mut sd = Vec::with_capacity(GRID_POINTS);
        for k in 0..GRID_POINTS {
            let col: Vec<f64> = curves.iter().map(|c| pick(c)[k]).collect();
            median.push(quantile(&col, 0.5).unwrap_or(f64::NAN));
            sd.push(std_dev(&col).unwrap_or(0.0));
        }
        BandCurve { median, sd }
    };
    Ok(NormalizedCurves {
        s: unit_grid(),
        translation: band(|c| &c.0),
        rotation: band(|c| &c.1),
        count: curves.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinationCurve {
    /// (translation progress, rotation progress) on the unit grid.
    pub points: Vec<(f64, f64)>,
    /// Set when one channel has no net displacement over the window.
    pub degenerate: Option<Channel>,
}

impl CoordinationCurve {
    /// Mean of `rotation - translation` progress over the grid; positive
    /// when the curve lies above `y = x`.
    pub fn mean_signed_deviation(&self) -> f64 {
        self.points.iter().map(|(x, y)| y - x).sum::<f64>() / self.points.len() as f64
    }

    pub fn max_abs_diff(&self, other: &CoordinationCurve) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| (a.0 - b.0).abs().max((a.1 - b.1).abs()))
            .fold(0.0, f64::max)
    }
}

/// Spatial coordination of `subject` over `window`. Progress is normalized
/// over the window so the curve runs from (0,0) to (1,1), and resampled by
/// cumulative arc length along the translation axis.
pub fn coordination_curve(slice: &ReachSlice, subject: Subject, window: Window) -> Result<CoordinationCurve> {
    slice.check()?;
    let end = match window {
        Window::Full => slice.len() - 1,
        Window::Ballistic => {
            let seg = segment_ballistic(slice)?;
            let t_split = slice.t[0] + seg.split;
            slice.t.partition_point(|&t| t <= t_split + 1e-12).saturating_sub(1)
        }
    };
    let e = &slice.errors(subject)[..=end];
    coordination_from_errors(e)
}

pub fn coordination_from_errors(e: &[(f64, f64)]) -> Result<CoordinationCurve> {
    if e.len() < 2 {
        return Err(Error::InvalidArgument("coordination window needs two samples".into()));
    }
    let (d0, d1) = (e[0], e[e.len() - 1]);
    let (span_t, span_r) = (d0.0 - d1.0, d0.1 - d1.1);
    let norm = |d: f64, d0: f64, span: f64| if span.abs() > DEGENERATE_EPS { (d0 - d) / span } else { 0.0 };
    let x: Vec<f64> = e.iter().map(|d| norm(d.0, d0.0, span_t)).collect();
    let y: Vec<f64> = e.iter().map(|d| norm(d.1, d0.1, span_r)).collect();
    let degenerate = if span_t.abs() <= DEGENERATE_EPS {
        Some(Channel::Translation)
    } else if span_r.abs() <= DEGENERATE_EPS {
        Some(Channel::Rotation)
    } else {
        None
    };
    // arc parameter along the non-degenerate axis
    let along = if degenerate == Some(Channel::Translation) { &y } else { &x };
    let mut arc = Vec::with_capacity(along.len());
    let mut acc = 0.0;
    arc.push(0.0);
    for w in along.windows(2) {
        acc += (w[1] - w[0]).abs();
        arc.push(acc);
    }
    let grid = unit_grid();
    let mut points: Vec<(f64, f64)> = if acc > 0.0 {
        let a: Vec<f64> = arc.iter().map(|v| v / acc).collect();
        grid.iter().map(|&s| (interp(&a, &x, s), interp(&a, &y, s))).collect()
    } else {
        vec![(0.0, 0.0); GRID_POINTS]
    };
    points[0] = (x[0], y[0]);
    points[GRID_POINTS - 1] = (x[x.len() - 1], y[y.len() - 1]);
    Ok(CoordinationCurve { points, degenerate })
}

/// Linear-interpolation quantile (type 7); `None` on empty input.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let h = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    Some(v[lo] + (v[hi] - v[lo]) * (h - lo as f64))
}

/// Sample standard deviation; 0 for one value, `None` for none.
pub fn std_dev(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    if n == 1 {
        return Some(0.0);
    }
    // shifted by the first value so identical inputs give exactly zero
    let x0 = values[0];
    let (s, s2) = values
        .iter()
        .fold((0.0, 0.0), |(s, s2), x| (s + (x - x0), s2 + (x - x0) * (x - x0)));
    let nf = n as f64;
    Some(((s2 - s * s / nf) / (nf - 1.0)).max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Non-zero differences used.
    pub n: usize,
    /// Sum of ranks of positive differences `a - b`.
    pub statistic: f64,
    /// Two-sided p-value; `None` when every difference is zero.
    pub p_value: Option<f64>,
    pub exact: bool,
}

impl Wilcoxon {
    pub fn no_test(&self) -> bool {
        self.p_value.is_none()
    }
}

/// Average ranks of `|d|`, 1-based.
fn average_ranks(abs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..abs.len()).collect();
    idx.sort_by(|&i, &j| abs[i].total_cmp(&abs[j]));
    let mut ranks = vec![0.0; abs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && abs[idx[j + 1]] == abs[idx[i]] {
            j += 1;
        }
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Exact two-sided p-value by counting sign patterns over doubled ranks.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let all = 2f64.powi(ranks.len() as i32);
    let w2 = (2.0 * w).round() as usize;
    let lower: f64 = counts[..=w2].iter().sum::<f64>() / all;
    let upper: f64 = counts[w2..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

/// Paired Wilcoxon signed-rank test on `a - b`.
pub fn wilcoxon_paired(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument("paired samples differ in length".into()));
    }
    if a.len() < 5 {
        return Err(Error::InvalidArgument("signed-rank test needs at least 5 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return Ok(Wilcoxon {
            n: 0,
            statistic: 0.0,
            p_value: None,
            exact: true,
        });
    }
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks = average_ranks(&abs);
    let w: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    if n <= EXACT_MAX_N {
        return Ok(Wilcoxon {
            n,
            statistic: w,
            p_value: Some(exact_p(&ranks, w)),
            exact: true,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::standard();
        (2.0 * (1.0 - normal.cdf(z))).min(1.0)
    };
    Ok(Wilcoxon {
        n,
        statistic: w,
        p_value: Some(p),
        exact: false,
    })
}

/// One questionnaire answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionnaireRow {
    pub participant: String,
    pub question: String,
    pub condition: String,
    pub score: i32,
}

pub fn read_questionnaire<R: Read>(r: R) -> Result<Vec<QuestionnaireRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut rows = Vec::new();
    for row in rdr.deserialize() {
        let row: QuestionnaireRow = row?;
        if !(-3..=3).contains(&row.score) {
            return Err(Error::InvalidArgument(format!(
                "score {} out of [-3, 3] for {}/{}",
                row.score, row.participant, row.question
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub question: String,
    pub condition_a: String,
    pub condition_b: String,
    pub n: usize,
    pub statistic: f64,
    pub p_value: Option<f64>,
    pub exact: bool,
}

/// Signed-rank tests for every question and condition pair, pairing
/// scores by participant. Pairs with fewer than 5 participants are skipped.
pub fn compare_conditions(rows: &[QuestionnaireRow]) -> Result<Vec<PairwiseComparison>> {
    let mut table: BTreeMap<&str, BTreeMap<&str, BTreeMap<&str, f64>>> = BTreeMap::new();
    for r in rows {
        table
            .entry(&r.question)
            .or_default()
            .entry(&r.condition)
            .or_default()
            .insert(&r.participant, r.score as f64);
    }
    let mut out = Vec::new();
    for (question, by_cond) in &table {
        let conds: Vec<&&str> = by_cond.keys().collect();
        for (i, ca) in conds.iter().enumerate() {
            for cb in &conds[i + 1..] {
                let (sa, sb) = (&by_cond[**ca], &by_cond[**cb]);
                let (a, b): (Vec<f64>, Vec<f64>) =
                    sa.iter().filter_map(|(p, x)| sb.get(p).map(|y| (*x, *y))).unzip();
                if a.len() < 5 {
                    continue;
                }
                let w = wilcoxon_paired(&a, &b)?;
                out.push(PairwiseComparison {
                    question: question.to_string(),
                    condition_a: ca.to_string(),
                    condition_b: cb.to_string(),
                    n: w.n,
                    statistic: w.statistic,
                    p_value: w.p_value,
                    exact: w.exact,
                });
            }
        }
    }
    Ok(out)
}

/// Every metric of one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub mode: MappingMode,
    pub trial: usize,
    pub visualization: bool,
    pub target: usize,
    pub kind: TargetKind,
    pub achieved: bool,
    pub duration: Option<f64>,
    pub overshoot_translation: Option<f64>,
    pub overshoot_rotation: Option<f64>,
    pub response_time_80: Option<f64>,
    pub ballistic_split: Option<f64>,
}

pub fn target_metrics(slice: &ReachSlice) -> TargetMetrics {
    let o = overshoot_percent(slice);
    let split = if slice.achieved && slice.len() >= 10 {
        segment_ballistic(slice).ok().map(|s| s.split)
    } else {
        None
    };
    TargetMetrics {
        mode: slice.mode,
        trial: slice.trial,
        visualization: slice.visualization,
        target: slice.target.index,
        kind: slice.target.kind,
        achieved: slice.achieved,
        duration: time_per_target(slice),
        overshoot_translation: o.translation,
        overshoot_rotation: o.rotation,
        response_time_80: response_time_80(slice),
        ballistic_split: split,
    }
}

pub fn all_target_metrics(slices: &[ReachSlice], exec: Execution) -> Vec<TargetMetrics> {
    map_ordered(exec, slices, target_metrics)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub median: Option<f64>,
    pub q25: Option<f64>,
    pub q75: Option<f64>,
    pub sd: Option<f64>,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        Self {
            n: values.len(),
            median: quantile(values, 0.5),
            q25: quantile(values, 0.25),
            q75: quantile(values, 0.75),
            sd: std_dev(values),
        }
    }
}

/// Summary row for one group of targets. `trial` and `visualization` are
/// empty when the group spans several values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub grouping: &'static str,
    pub mode: MappingMode,
    pub trial: Option<usize>,
    pub visualization: Option<bool>,
    pub targets: usize,
    pub achieved: usize,
    pub duration_median: Option<f64>,
    pub duration_q25: Option<f64>,
    pub duration_q75: Option<f64>,
    pub duration_sd: Option<f64>,
    pub overshoot_translation_median: Option<f64>,
    pub overshoot_rotation_median: Option<f64>,
    pub response_time_80_median: Option<f64>,
}

fn summarize(grouping: &'static str, key: (MappingMode, Option<usize>, Option<bool>), rows: &[&TargetMetrics]) -> SummaryRow {
    let col = |f: fn(&TargetMetrics) -> Option<f64>| -> Vec<f64> { rows.iter().filter_map(|r| f(r)).collect() };
    let d = Stats::of(&col(|r| r.duration));
    SummaryRow {
        grouping,
        mode: key.0,
        trial: key.1,
        visualization: key.2,
        targets: rows.len(),
        achieved: rows.iter().filter(|r| r.achieved).count(),
        duration_median: d.median,
        duration_q25: d.q25,
        duration_q75: d.q75,
        duration_sd: d.sd,
        overshoot_translation_median: quantile(&col(|r| r.overshoot_translation), 0.5),
        overshoot_rotation_median: quantile(&col(|r| r.overshoot_rotation), 0.5),
        response_time_80_median: quantile(&col(|r| r.response_time_80), 0.5),
    }
}

/// Groupings: per mode and trial, per mode, and per mode and visualization.
pub fn summary_table(metrics: &[TargetMetrics]) -> Vec<SummaryRow> {
    type Key = (MappingMode, Option<usize>, Option<bool>);
    let group = |name: &'static str, key: fn(&TargetMetrics) -> Key| {
        let mut groups: BTreeMap<Key, Vec<&TargetMetrics>> = BTreeMap::new();
        for m in metrics {
            groups.entry(key(m)).or_default().push(m);
        }
        groups
            .into_iter()
            .map(|(k, rows)| summarize(name, k, &rows))
            .collect::<Vec<_>>()
    };
    let mut out = group("trial", |m| (m.mode, Some(m.trial), None));
    out.extend(group("mode", |m| (m.mode, None, None)));
    out.extend(group("visualization", |m| (m.mode, None, Some(m.visualization))));
    out
}

pub fn write_csv<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_about;
    use crate::operator::ReachPlan;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;

    const DT: f64 = 0.01;

    fn target(goal: Pose) -> TargetSpec {
        TargetSpec {
            index: 0,
            kind: TargetKind::Outer,
            hand_endpoint: goal,
            effector_target: goal,
            tol_translation: 0.02,
            tol_rotation: 10f64.to_radians(),
            dwell: 1.0,
        }
    }

    /// Slice whose hand and desired effector follow `poses`.
    fn slice_of(poses: Vec<Pose>, goal: Pose) -> ReachSlice {
        ReachSlice {
            mode: MappingMode::Direct,
            trial: 1,
            visualization: true,
            target: target(goal),
            t: (0..poses.len()).map(|i| i as f64 * DT).collect(),
            robot: poses.clone(),
            hand: poses.clone(),
            desired: poses,
            achieved: true,
        }
    }

    fn along_x(ds: &[f64]) -> Vec<Pose> {
        ds.iter().map(|&d| Pose::from_translation(Vector3::new(d, 0.0, 0.0))).collect()
    }

    #[test]
    fn time_per_target_cases() {
        let mut s = slice_of(along_x(&[0.1; 321]), Pose::identity());
        assert_abs_diff_eq!(time_per_target(&s).unwrap(), 3.2, epsilon = 1e-9);
        s.achieved = false;
        assert_eq!(time_per_target(&s), None);
    }

    #[test]
    fn overshoot_translation_fifty_percent() {
        let s = slice_of(along_x(&[0.10, 0.05, 0.02, 0.025, 0.03, 0.02, 0.0]), Pose::identity());
        let o = overshoot_percent(&s);
        assert_abs_diff_eq!(o.translation.unwrap(), 50.0, epsilon = 1e-9);
        assert_eq!(o.rotation, Some(0.0));
    }

    #[test]
    fn overshoot_monotone_is_zero_and_never_entered_is_absent() {
        let s = slice_of(along_x(&[0.10, 0.05, 0.019, 0.01, 0.0]), Pose::identity());
        assert_eq!(overshoot_percent(&s).translation, Some(0.0));
        let s = slice_of(along_x(&[0.10, 0.05]), Pose::identity());
        assert_eq!(overshoot_percent(&s).translation, None);
    }

    #[test]
    fn overshoot_rotation_ten_percent() {
        let poses: Vec<Pose> = [30.0, 15.0, 10.0, 11.0, 5.0, 0.0]
            .iter()
            .map(|&deg: &f64| Pose::from_axis_angle(&Vector3::z(), deg.to_radians()))
            .collect();
        let o = overshoot_percent(&slice_of(poses, Pose::identity()));
        assert_abs_diff_eq!(o.rotation.unwrap(), 10.0, epsilon = 1e-9);
    }

    #[test]
    fn response_time_linear_and_max_of_channels() {
        let goal = Pose::from_axis_angle(&Vector3::z(), 0.5);
        let mut goal = goal;
        goal.translation = Vector3::new(0.1, 0.0, 0.0);
        let poses: Vec<Pose> = (0..=200)
            .map(|i| {
                let p = i as f64 / 200.0;
                Pose {
                    rotation: rotation_about(&Vector3::z(), 0.5 * p),
                    translation: Vector3::new(0.1 * p, 0.0, 0.0),
                }
            })
            .collect();
        let s = slice_of(poses, goal);
        assert_abs_diff_eq!(response_time_80(&s).unwrap(), 1.6, epsilon = 1e-9);

        // translation hits 0.8 at 1.0 s, rotation at 1.4 s
        let poses: Vec<Pose> = (0..=200)
            .map(|i| {
                let t = i as f64 * DT;
                let pt = (0.8 * t).min(1.0);
                let pr = (0.8 / 1.4 * t).min(1.0);
                Pose {
                    rotation: rotation_about(&Vector3::z(), 0.5 * pr),
                    translation: Vector3::new(0.1 * pt, 0.0, 0.0),
                }
            })
            .collect();
        let s = slice_of(poses, goal);
        assert_abs_diff_eq!(response_time_80(&s).unwrap(), 1.4, epsilon = 1e-9);
    }

    #[test]
    fn response_requires_staying_above() {
        // crosses 0.8, dips back, crosses again at the end
        let s = slice_of(along_x(&[1.0, 0.1, 0.3, 0.1, 0.0]), Pose::identity());
        let r = response_time_80(&s).unwrap();
        assert_abs_diff_eq!(r, 0.03 - 0.01 * (0.3 - 0.2) / (0.3 - 0.1), epsilon = 1e-12);
    }

    #[test]
    fn zero_initial_error_channel_is_complete() {
        let s = slice_of(along_x(&[0.1, 0.05, 0.0]), Pose::identity());
        let p = progress(&s.errors(Subject::Effector));
        assert!(p.iter().all(|x| x.1 == 1.0));
    }

    fn two_phase(fraction: f64, amplitude: f64) -> ReachSlice {
        let from = Pose::identity();
        let to = Pose {
            rotation: rotation_about(&Vector3::new(0.3, 1.0, 0.2), 0.6),
            translation: Vector3::new(0.15, 0.0, 0.0),
        };
        let plan = ReachPlan::new(from, to, 2.0, fraction, amplitude, 0.0, 0).unwrap();
        let mut poses: Vec<Pose> = (0..=200).map(|i| plan.pose_at(i as f64 * DT)).collect();
        poses.extend(std::iter::repeat_n(to, 100));
        slice_of(poses, to)
    }

    #[test]
    fn segmentation_two_phase_split_at_half() {
        let seg = segment_ballistic(&two_phase(0.5, 0.9)).unwrap();
        assert!(!seg.fallback);
        assert!((seg.split - 1.0).abs() <= 0.1, "{seg:?}");
    }

    #[test]
    fn segmentation_single_phase_falls_back() {
        let from = Pose::identity();
        let to = Pose::from_translation(Vector3::new(0.15, 0.0, 0.0));
        let poses: Vec<Pose> = (0..=200)
            .map(|i| {
                let p = crate::operator::minimum_jerk(i as f64 / 200.0);
                Pose::from_translation(to.translation * p)
            })
            .collect();
        let seg = segment_ballistic(&slice_of(poses, to)).unwrap();
        assert!(seg.fallback);
        assert_abs_diff_eq!(seg.split, 1.0, epsilon = 1e-12);
        let _ = from;
    }

    #[test]
    fn segmentation_bimodal_lobes() {
        // two equal bell-shaped speed lobes over 0-1 s and 1-2 s
        let mut x = 0.0;
        let mut poses = Vec::new();
        for i in 0..=200 {
            let t = i as f64 * DT;
            let s = t.fract();
            poses.push(Pose::from_translation(Vector3::new(x, 0.0, 0.0)));
            x += crate::operator::minimum_jerk_rate(s) * DT * if t < 1.0 { 1.0 } else { 0.8 };
        }
        let goal = poses[200];
        let seg = segment_ballistic(&slice_of(poses, goal)).unwrap();
        assert!(!seg.fallback);
        assert!((seg.split - 1.0).abs() <= SMOOTHING_WINDOW, "{seg:?}");
    }

    #[test]
    fn segmentation_rejects_single_sample() {
        assert!(segment_ballistic(&slice_of(along_x(&[0.1]), Pose::identity())).is_err());
    }

    #[test]
    fn normalized_curves_single_and_identical() {
        let s = two_phase(0.5, 0.9);
        let own = normalized_progress(&s).unwrap();
        let one = normalized_curves(std::slice::from_ref(&s), Execution::Sequential).unwrap();
        assert_eq!(one.translation.median, own.0);
        assert_eq!(one.rotation.median, own.1);
        let three = normalized_curves(&[s.clone(), s.clone(), s], Execution::Sequential).unwrap();
        assert!(three.translation.sd.iter().chain(&three.rotation.sd).all(|&x| x == 0.0));
        assert_eq!(*one.translation.median.last().unwrap(), 1.0);
    }

    #[test]
    fn coordination_endpoints_and_diagonal() {
        let s = two_phase(0.5, 0.9);
        for w in [Window::Full, Window::Ballistic] {
            let c = coordination_curve(&s, Subject::Hand, w).unwrap();
            assert_eq!(c.points.len(), GRID_POINTS);
            assert_eq!(c.points[0], (0.0, 0.0));
            assert_eq!(c.points[GRID_POINTS - 1], (1.0, 1.0));
            assert!(c.degenerate.is_none());
            for (x, y) in &c.points {
                assert!((x - y).abs() < 1e-6, "{x} {y}");
            }
        }
    }

    #[test]
    fn coordination_flags_missing_translation() {
        let poses: Vec<Pose> = (0..=50)
            .map(|i| Pose::from_axis_angle(&Vector3::z(), 0.01 * i as f64))
            .collect();
        let goal = poses[50];
        let c = coordination_curve(&slice_of(poses, goal), Subject::Hand, Window::Full).unwrap();
        assert_eq!(c.degenerate, Some(Channel::Translation));
        assert!(c.points.iter().all(|p| p.0 == 0.0));
        assert_abs_diff_eq!(c.points[GRID_POINTS - 1].1, 1.0, epsilon = 1e-12);
    }

    /// Two-sided p by enumerating all sign patterns of the ranks.
    fn brute_force_p(ranks: &[f64], w: f64) -> f64 {
        let n = ranks.len();
        let mean = ranks.iter().sum::<f64>() / 2.0;
        let obs = (w - mean).abs();
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if (s - mean).abs() >= obs - 1e-9 {
                hits += 1;
            }
        }
        hits as f64 / (1u64 << n) as f64
    }

    #[test]
    fn wilcoxon_examples() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(wilcoxon_paired(&a, &a).unwrap().no_test());
        let b = [0.0, 0.5, 1.0, 3.5, 2.0];
        let w = wilcoxon_paired(&a, &b).unwrap();
        assert_abs_diff_eq!(w.p_value.unwrap(), 0.0625, epsilon = 1e-15);
        assert_eq!(w.statistic, 15.0);
        let r = wilcoxon_paired(&b, &a).unwrap();
        assert_eq!(r.p_value, w.p_value);
        assert_eq!(r.statistic, 0.0);
        assert!(wilcoxon_paired(&a[..4], &b[..4]).is_err());
        assert!(wilcoxon_paired(&a, &b[..4]).is_err());
    }

    #[test]
    fn wilcoxon_exact_matches_enumeration_with_ties() {
        let a = [3.0, 1.0, -2.0, 2.0, 0.0, 1.0, 3.0, -1.0];
        let b = [1.0, 1.0, 0.0, 0.0, -2.0, 0.0, 2.0, 1.0];
        let w = wilcoxon_paired(&a, &b).unwrap();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).filter(|x| *x != 0.0).collect();
        let ranks = average_ranks(&d.iter().map(|x| x.abs()).collect::<Vec<_>>());
        assert_abs_diff_eq!(w.p_value.unwrap(), brute_force_p(&ranks, w.statistic), epsilon = 1e-12);
    }

    #[test]
    fn wilcoxon_normal_branch() {
        let a: Vec<f64> = (0..20).map(|i| (i % 7) as f64 - 3.0).collect();
        let b: Vec<f64> = (0..20).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        let w = wilcoxon_paired(&a, &b).unwrap();
        assert!(!w.exact || w.n <= EXACT_MAX_N);
        let p = w.p_value.unwrap();
        assert!((0.0..=1.0).contains(&p));
        let r = wilcoxon_paired(&b, &a).unwrap();
        assert_abs_diff_eq!(r.p_value.unwrap(), p, epsilon = 1e-15);
        assert_abs_diff_eq!(r.statistic, (w.n * (w.n + 1)) as f64 / 2.0 - w.statistic, epsilon = 1e-12);
    }

    #[test]
    fn quantiles_and_sd() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&v, 0.5), Some(2.5));
        assert_eq!(quantile(&v, 0.25), Some(1.75));
        assert_eq!(quantile(&[], 0.5), None);
        assert_abs_diff_eq!(std_dev(&v).unwrap(), (5.0f64 / 3.0).sqrt(), epsilon = 1e-15);
        assert_eq!(std_dev(&[2.0]), Some(0.0));
    }

    #[test]
    fn questionnaire_ingest_and_compare() {
        let mut text = String::from("participant,question,condition,score\n");
        for p in 0..6 {
            text += &format!("p{p},q1,direct,{}\n", -1 + (p % 2));
            text += &format!("p{p},q1,wand,{}\n", 2 + (p % 2) - (p / 5));
        }
        let rows = read_questionnaire(text.as_bytes()).unwrap();
        assert_eq!(rows.len(), 12);
        let cmp = compare_conditions(&rows).unwrap();
        assert_eq!(cmp.len(), 1);
        assert_eq!(cmp[0].condition_a, "direct");
        assert!(cmp[0].p_value.unwrap() < 0.05);
        let bad = "participant,question,condition,score\np,q,c,4\n";
        assert!(read_questionnaire(bad.as_bytes()).is_err());
    }

    #[test]
    fn summary_groupings() {
        let mk = |trial, vis, d| TargetMetrics {
            mode: MappingMode::Wand,
            trial,
            visualization: vis,
            target: 0,
            kind: TargetKind::Outer,
            achieved: true,
            duration: Some(d),
            overshoot_translation: Some(0.0),
            overshoot_rotation: None,
            response_time_80: Some(1.0),
            ballistic_split: Some(1.0),
        };
        let rows = summary_table(&[mk(1, true, 2.0), mk(1, true, 4.0), mk(4, false, 6.0)]);
        assert_eq!(rows.iter().filter(|r| r.grouping == "trial").count(), 2);
        let mode = rows.iter().find(|r| r.grouping == "mode").unwrap();
        assert_eq!(mode.duration_median, Some(4.0));
        let off = rows
            .iter()
            .find(|r| r.grouping == "visualization" && r.visualization == Some(false))
            .unwrap();
        assert_eq!(off.targets, 1);
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("grouping,mode,trial"));
    }
}
