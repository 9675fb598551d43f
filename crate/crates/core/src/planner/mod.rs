//! Occupancy-based planner: sampling, costs, selection, refinement and the closed loop.

mod closed_loop;
mod cost;
mod loss;
mod refine;

pub use closed_loop::{closed_loop_rollout, ClosedLoop, PlanStep, PlanningForecast, WorldModel};
pub use cost::{
    agent_safety_cost, evaluate_candidates, footprint_hits, learned_volume_cost, road_safety_cost,
    select_index, select_trajectory, CostBreakdown, Selection,
};
pub use loss::{plan_loss, PlanLoss};
pub use refine::{bev_refine, PlannerNet, RefineParams};

use serde::{Deserialize, Serialize};

use crate::action::Command;
use crate::error::{Error, Result};

/// Cumulative `(dx, dy)` waypoints from the current ego pose, one per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<[f64; 2]>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(waypoints: Vec<[f64; 2]>, dt: f64) -> Result<Self> {
        if waypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory waypoint".into()));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidConfig(format!("trajectory dt {dt}")));
        }
        Ok(Self { waypoints, dt })
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    /// Per-step displacement vectors.
    pub fn steps(&self) -> Vec<[f64; 2]> {
        let mut prev = [0.0, 0.0];
        self.waypoints
            .iter()
            .map(|w| {
                let d = [w[0] - prev[0], w[1] - prev[1]];
                prev = *w;
                d
            })
            .collect()
    }

    /// Heading at each waypoint from the chord of the step reaching it;
    /// a zero-length step keeps the previous heading (0 at the start).
    pub fn headings(&self) -> Vec<f64> {
        let mut heading = 0.0;
        self.steps()
            .into_iter()
            .map(|d| {
                if d[0].hypot(d[1]) > 1e-9 {
                    heading = d[1].atan2(d[0]);
                }
                heading
            })
            .collect()
    }

    /// True when no step is longer than `v_max * dt` (with a small tolerance).
    pub fn within_speed(&self, v_max: f64) -> bool {
        let lim = v_max * self.dt + 1e-9;
        self.steps().iter().all(|d| d[0].hypot(d[1]) <= lim)
    }

    /// Rescales steps longer than `v_max * dt`; returns `self` unchanged otherwise.
    pub fn clamped(self, v_max: f64) -> Self {
        if self.within_speed(v_max) {
            return self;
        }
        let lim = v_max * self.dt;
        let mut at = [0.0, 0.0];
        let waypoints = self
            .steps()
            .into_iter()
            .map(|d| {
                let n = d[0].hypot(d[1]);
                let k = if n > lim { lim / n } else { 1.0 };
                at = [at[0] + d[0] * k, at[1] + d[1] * k];
                at
            })
            .collect();
        Self {
            waypoints,
            dt: self.dt,
        }
    }
}

/// Candidates plus the generator parameters that produced each one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryCandidateSet {
    pub candidates: Vec<Trajectory>,
    /// `(speed, curvature)` per candidate.
    pub params: Vec<(f64, f64)>,
    pub command: Command,
}

impl TrajectoryCandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Curvature filter for a command.
pub fn command_allows(command: Command, curvature: f64, kappa_straight: f64) -> bool {
    match command {
        Command::Forward => curvature.abs() <= kappa_straight,
        Command::Left => curvature > 0.0,
        Command::Right => curvature < 0.0,
    }
}

/// Constant speed and curvature arc from the origin heading +x, sampled at `k * dt`.
pub fn arc_waypoints(speed: f64, curvature: f64, horizon: usize, dt: f64) -> Vec<[f64; 2]> {
    (1..=horizon)
        .map(|k| {
            let s = speed * dt * k as f64;
            if curvature.abs() < 1e-12 {
                [s, 0.0]
            } else {
                let th = curvature * s;
                [th.sin() / curvature, (1.0 - th.cos()) / curvature]
            }
        })
        .collect()
}

/// Speed-major, curvature-minor arcs allowed by `command`.
pub fn sample_trajectories(
    command: Command,
    speeds: &[f64],
    curvatures: &[f64],
    kappa_straight: f64,
    horizon: usize,
    dt: f64,
) -> Result<TrajectoryCandidateSet> {
    if speeds.is_empty() || curvatures.is_empty() {
        return Err(Error::InvalidConfig("speed and curvature grids must be nonempty".into()));
    }
    if horizon == 0 {
        return Err(Error::InvalidConfig("planning horizon must be >= 1".into()));
    }
    let mut set = TrajectoryCandidateSet {
        candidates: Vec::new(),
        params: Vec::new(),
        command,
    };
    for &v in speeds {
        for &k in curvatures {
            if !command_allows(command, k, kappa_straight) {
                continue;
            }
            set.candidates
                .push(Trajectory::new(arc_waypoints(v, k, horizon, dt), dt)?);
            set.params.push((v, k));
        }
    }
    if set.candidates.is_empty() {
        return Err(Error::NoCandidates(command.name()));
    }
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub w_a: f64,
    pub w_r: f64,
    pub w_v: f64,
    pub lateral_margin: f64,
    pub longitudinal_margin: f64,
    pub sigma: f64,
    pub hard_penalty: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w_a: 10.0,
            w_r: 5.0,
            w_v: 1.0,
            lateral_margin: 1.0,
            longitudinal_margin: 2.0,
            sigma: 0.5,
            hard_penalty: 1e3,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_a > 0.0 && self.w_r > 0.0 && self.w_v.is_finite()) {
            return Err(Error::InvalidConfig("w_a and w_r must be > 0".into()));
        }
        if !(self.lateral_margin >= 0.0 && self.longitudinal_margin >= 0.0 && self.sigma > 0.0) {
            return Err(Error::InvalidConfig("margins must be >= 0 and sigma > 0".into()));
        }
        if !(self.hard_penalty > 0.0) {
            return Err(Error::InvalidConfig("hard penalty must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    /// Sampled speeds (m/s); listed fastest first so index 0 is the fastest arc.
    pub speeds: Vec<f64>,
    pub curvatures: Vec<f64>,
    pub kappa_straight: f64,
    /// Planning lookahead in steps.
    pub horizon: usize,
    pub dt: f64,
    pub v_max: f64,
    /// (length, width) in meters.
    pub footprint: (f64, f64),
    pub weights: CostWeights,
    pub refine_hidden: usize,
    pub seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            speeds: vec![4.0, 3.0, 2.0, 1.0, 0.0],
            curvatures: vec![0.0, 0.02, -0.02, 0.05, -0.05, 0.1, -0.1],
            kappa_straight: 0.01,
            horizon: 4,
            dt: 0.5,
            v_max: 4.0,
            footprint: (4.0, 1.8),
            weights: CostWeights::default(),
            refine_hidden: 32,
            seed: 0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.speeds.is_empty() || self.curvatures.is_empty() {
            return Err(Error::InvalidConfig("speed and curvature grids must be nonempty".into()));
        }
        if self.speeds.iter().any(|&v| !(v >= 0.0 && v <= self.v_max)) {
            return Err(Error::InvalidConfig("speeds must lie in [0, v_max]".into()));
        }
        if self.curvatures.iter().any(|k| !k.is_finite()) || !(self.kappa_straight >= 0.0) {
            return Err(Error::InvalidConfig("bad curvature grid".into()));
        }
        if self.horizon == 0 || !(self.dt > 0.0) {
            return Err(Error::InvalidConfig("planner horizon and dt must be positive".into()));
        }
        if !(self.footprint.0 > 0.0 && self.footprint.1 > 0.0) {
            return Err(Error::InvalidConfig("footprint must be positive".into()));
        }
        Ok(())
    }

    pub fn sample(&self, command: Command) -> Result<TrajectoryCandidateSet> {
        sample_trajectories(
            command,
            &self.speeds,
            &self.curvatures,
            self.kappa_straight,
            self.horizon,
            self.dt,
        )
    }
}
