//! Reference paths for the tracking tasks and the tracking-error metric.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::math;
use crate::mpc::{tracking_errors, TrackingLog};
use crate::plant::{reach_distance, PlantConfig};
use crate::State;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Task {
    O,
    T,
    H,
    U,
    #[cfg_attr(feature = "serde", serde(rename = "square"))]
    Square,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::O, Task::T, Task::H, Task::U, Task::Square];

    pub fn label(self) -> &'static str {
        match self {
            Task::O => "O",
            Task::T => "T",
            Task::H => "H",
            Task::U => "U",
            Task::Square => "square",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "O" | "o" => Ok(Task::O),
            "T" | "t" => Ok(Task::T),
            "H" | "h" => Ok(Task::H),
            "U" | "u" => Ok(Task::U),
            "square" | "SQUARE" | "square_targets" | "SQUARE_TARGETS" => Ok(Task::Square),
            other => Err(Error::InvalidArgument(format!("unknown task `{other}` (expected O, T, H, U or square)"))),
        }
    }
}

/// Letter strokes in the unit square, x to the right and y up. Retraced
/// segments keep each letter a single polyline.
pub const LETTER_T: &[[f64; 2]] = &[[0.0, 1.0], [1.0, 1.0], [0.5, 1.0], [0.5, 0.0]];
pub const LETTER_H: &[[f64; 2]] = &[[0.0, 1.0], [0.0, 0.0], [0.0, 0.5], [1.0, 0.5], [1.0, 1.0], [1.0, 0.0]];
pub const LETTER_U: &[[f64; 2]] = &[[0.0, 1.0], [0.0, 0.0], [1.0, 0.0], [1.0, 1.0]];

/// Square targets in the unit square: the four corners, then back to the
/// first.
pub const SQUARE_WAYPOINTS: &[[f64; 2]] = &[[1.0, 1.0], [0.0, 1.0], [0.0, 0.0], [1.0, 0.0], [1.0, 1.0]];

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TaskParams {
    /// Center of the task plane, mm.
    pub center: State,
    pub circle_radius: f64,
    /// Samples per circle lap.
    pub circle_ticks: usize,
    /// Side of the letter and square window, mm.
    pub window: f64,
    /// Letter traversal speed, mm/s.
    pub letter_speed: f64,
    pub corner_dwell: usize,
    /// Ticks each square target is held.
    pub target_dwell: usize,
    /// Ticks the first reference point is held before the path starts.
    pub lead_in: usize,
    /// Reachability tolerance of the workspace check, mm.
    pub reach_tol: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            center: [0.0, 0.0, 435.0],
            circle_radius: 60.0,
            circle_ticks: 200,
            window: 100.0,
            letter_speed: 50.0,
            corner_dwell: 3,
            target_dwell: 40,
            lead_in: 0,
            reach_tol: 0.5,
        }
    }
}

impl TaskParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.circle_radius, self.window, self.letter_speed];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || self.center.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("task radius, window and speed must be positive and finite".into()));
        }
        if self.circle_ticks < 2 || self.target_dwell == 0 {
            return Err(Error::InvalidConfig("circle_ticks must be ≥ 2 and target_dwell ≥ 1".into()));
        }
        if !(self.reach_tol >= 0.0) {
            return Err(Error::InvalidConfig("reach_tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// One target per plant tick, sample `k` at `t = k·dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePath {
    pub task: Task,
    pub dt: f64,
    pub points: Vec<State>,
}

impl ReferencePath {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.points.len()).map(move |k| k as f64 * self.dt)
    }
}

fn plane_point(params: &TaskParams, uv: [f64; 2]) -> State {
    let half = 0.5 * params.window;
    [
        params.center[0] + (2.0 * uv[0] - 1.0) * half,
        params.center[1] + (2.0 * uv[1] - 1.0) * half,
        params.center[2],
    ]
}

fn push_hold(points: &mut Vec<State>, p: State, n: usize) {
    points.extend(core::iter::repeat(p).take(n));
}

/// Samples a polyline at spacing `step` per tick. Each segment is split into
/// a whole number of ticks so vertices are hit exactly; interior vertices are
/// held for `dwell` extra ticks.
pub fn sample_polyline(vertices: &[State], step: f64, dwell: usize) -> Vec<State> {
    let mut points = Vec::new();
    let Some(first) = vertices.first() else {
        return points;
    };
    points.push(*first);
    for (i, pair) in vertices.windows(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        let d: State = core::array::from_fn(|k| b[k] - a[k]);
        let len = math::norm(&d);
        let ticks = (libm::round(len / step) as usize).max(1);
        for j in 1..=ticks {
            let s = j as f64 / ticks as f64;
            points.push(core::array::from_fn(|k| a[k] + s * d[k]));
        }
        if i + 2 < vertices.len() {
            push_hold(&mut points, b, dwell);
        }
    }
    points
}

/// Builds the reference for `task` and checks every sample against the arm's
/// reachable set.
pub fn make_reference(task: Task, params: &TaskParams, plant: &PlantConfig) -> Result<ReferencePath> {
    params.validate()?;
    plant.validate()?;
    let dt = plant.tick;
    let mut points = match task {
        Task::O => {
            let n = params.circle_ticks;
            let c = params.center;
            let r = params.circle_radius;
            (0..=n)
                .map(|k| {
                    let a = 2.0 * PI * k as f64 / n as f64;
                    [c[0] + r * math::cos(a), c[1] + r * math::sin(a), c[2]]
                })
                .collect::<Vec<State>>()
        }
        Task::T | Task::H | Task::U => {
            let strokes = match task {
                Task::T => LETTER_T,
                Task::H => LETTER_H,
                _ => LETTER_U,
            };
            let vertices: Vec<State> = strokes.iter().map(|uv| plane_point(params, *uv)).collect();
            sample_polyline(&vertices, params.letter_speed * dt, params.corner_dwell)
        }
        Task::Square => {
            let mut pts = Vec::new();
            for uv in SQUARE_WAYPOINTS {
                push_hold(&mut pts, plane_point(params, *uv), params.target_dwell);
            }
            pts
        }
    };
    if params.lead_in > 0 {
        let start = points[0];
        let mut lead = Vec::with_capacity(params.lead_in + points.len());
        push_hold(&mut lead, start, params.lead_in);
        lead.append(&mut points);
        points = lead;
    }
    check_workspace(&points, plant, params.reach_tol)?;
    Ok(ReferencePath { task, dt, points })
}

/// Every point inside the length sphere and within `tol` of a static pose.
pub fn check_workspace(points: &[State], plant: &PlantConfig, tol: f64) -> Result<()> {
    let mut last: Option<State> = None;
    for p in points {
        if last == Some(*p) {
            continue;
        }
        if math::norm(p) > plant.total_length() || reach_distance(plant, p) > tol {
            return Err(Error::Unreachable { point: *p });
        }
        last = Some(*p);
    }
    Ok(())
}

/// Mean Euclidean tip error over the log, mm.
pub fn avg_tracking_error(log: &TrackingLog) -> Result<f64> {
    if log.is_empty() {
        return Err(Error::InvalidArgument("average error of an empty tracking log".into()));
    }
    let e = tracking_errors(log);
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrackingReport {
    pub controller: String,
    pub task: Task,
    pub seed: u64,
    pub avg_error: f64,
    pub max_error: f64,
    /// Error at the last tick of each target hold; square task only.
    #[cfg_attr(feature = "serde", serde(default, skip_serializing_if = "Vec::is_empty"))]
    pub dwell_end_errors: Vec<f64>,
    pub errors: Vec<f64>,
}

impl TrackingReport {
    pub fn from_log(controller: &str, task: Task, seed: u64, log: &TrackingLog, params: &TaskParams) -> Result<Self> {
        let avg_error = avg_tracking_error(log)?;
        let errors = tracking_errors(log);
        let max_error = errors.iter().copied().fold(0.0, f64::max);
        let dwell_end_errors = if task == Task::Square {
            let offset = params.lead_in;
            (1..=SQUARE_WAYPOINTS.len())
                .filter_map(|i| errors.get(offset + i * params.target_dwell - 1).copied())
                .collect()
        } else {
            Vec::new()
        };
        Ok(TrackingReport {
            controller: controller.into(),
            task,
            seed,
            avg_error,
            max_error,
            dwell_end_errors,
            errors,
        })
    }
}
