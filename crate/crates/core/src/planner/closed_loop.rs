use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::action::{ActionCondition, Command};
use crate::error::{Error, Result};
use crate::grid::{EgoPose, GridConfig, SemanticGrid};
use crate::scalar::Scalar;
use crate::synthworld::GridFrame;
use crate::tensor::Tensor;

use super::cost::{agent_safety_cost, select_trajectory, CostBreakdown};
use super::refine::{bev_refine, PlannerNet};
use super::PlannerConfig;

/// What the planner sees at one step: future grids in the current ego frame
/// and, for learned worlds, the current BEV embedding `[h, w, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanningForecast<T> {
    pub grids: Vec<SemanticGrid>,
    pub bev: Option<Tensor<T>>,
}

/// A forecasting world the closed loop can plan against and act in.
pub trait WorldModel<T: Scalar> {
    fn grid(&self) -> &GridConfig;
    fn time(&self) -> usize;
    fn ego_pose(&self) -> EgoPose;
    /// `steps` future grids in the current ego frame with the ego held still.
    fn plan_forecast(&mut self, steps: usize) -> Result<PlanningForecast<T>>;
    /// Applies the ego action and returns the world's frame at the new time.
    fn advance(&mut self, actions: &[ActionCondition]) -> Result<GridFrame>;
    /// Ground truth at the current time and ego pose, if the world knows it.
    fn ground_truth(&self) -> Result<Option<GridFrame>>;
}

/// One plan-trace record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub t: usize,
    pub command: Command,
    pub ego_pose: EgoPose,
    pub selected_index: usize,
    /// `(speed, curvature)` of the selected candidate.
    pub selected_params: (f64, f64),
    pub refined: bool,
    /// Executed step `(dx, dy)`.
    pub waypoint: [f64; 2],
    pub trajectory: Vec<[f64; 2]>,
    pub hard_collision: bool,
    pub costs: Vec<CostBreakdown>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    pub steps: Vec<PlanStep>,
    /// World output after each step.
    pub frames: Vec<GridFrame>,
    /// Ground truth after each step at the executed pose (empty if unknown).
    pub ground_truth: Vec<GridFrame>,
}

impl ClosedLoop {
    /// Plan trace as JSON lines.
    pub fn write_trace(&self, mut out: impl Write) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Forecast, sample, score, select, refine, act; the first waypoint of the
/// chosen trajectory becomes the next trajectory-step action.
pub fn closed_loop_rollout<T: Scalar, W: WorldModel<T> + ?Sized>(
    world: &mut W,
    commands: &[Command],
    net: Option<&PlannerNet<T>>,
    cfg: &PlannerConfig,
) -> Result<ClosedLoop> {
    if commands.is_empty() {
        return Err(Error::InvalidConfig("closed loop horizon must be >= 1".into()));
    }
    cfg.validate()?;
    let mut out = ClosedLoop {
        steps: Vec::with_capacity(commands.len()),
        frames: Vec::with_capacity(commands.len()),
        ground_truth: Vec::new(),
    };
    for &command in commands {
        let t = world.time();
        let ego_pose = world.ego_pose();
        let forecast = world.plan_forecast(cfg.horizon)?;
        let set = cfg.sample(command)?;
        let volume = match (net, &forecast.bev) {
            (Some(n), Some(bev)) => Some((bev, &n.cost_head)),
            _ => None,
        };
        let sel = select_trajectory(&set, &forecast.grids, volume, cfg)?;
        let selected_collides = sel.costs[sel.index].collides();
        let mut chosen = sel.trajectory.clone();
        let mut refined = false;
        if let (Some(n), Some(bev)) = (net, &forecast.bev) {
            let r = bev_refine(&chosen, command, bev, &n.refine)?.clamped(cfg.v_max);
            let (_, flags) = agent_safety_cost(&r, &forecast.grids, cfg.footprint, &cfg.weights)?;
            let r_collides = flags.iter().any(|&c| c);
            if !r_collides || selected_collides {
                refined = r != chosen;
                chosen = r;
            }
        }
        let waypoint = chosen.waypoints[0];
        let frame = world.advance(&[ActionCondition::TrajectoryStep {
            dx: waypoint[0],
            dy: waypoint[1],
        }])?;
        out.frames.push(frame);
        if let Some(gt) = world.ground_truth()? {
            out.ground_truth.push(gt);
        }
        out.steps.push(PlanStep {
            t,
            command,
            ego_pose,
            selected_index: sel.index,
            selected_params: set.params[sel.index],
            refined,
            waypoint,
            trajectory: chosen.waypoints.clone(),
            hard_collision: selected_collides,
            costs: sel.costs,
        });
    }
    Ok(out)
}
