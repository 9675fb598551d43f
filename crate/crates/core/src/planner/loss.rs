use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{category, SemanticGrid};

use super::cost::footprint_hits;
use super::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanLoss {
    pub value: f64,
    /// `max(0, expert_cost - min candidate cost)`
    pub margin: f64,
    /// Mean squared waypoint distance between final and expert.
    pub l2: f64,
    /// Steps where the final footprint overlaps an obstacle.
    pub collisions: usize,
    pub grad_candidate_costs: Vec<f64>,
    pub grad_expert_cost: f64,
    pub grad_final: Vec<[f64; 2]>,
}

/// Max-margin, imitation and collision terms of the planning loss. The
/// collision count carries no gradient.
pub fn plan_loss(
    candidate_costs: &[f64],
    expert_cost: f64,
    expert: &Trajectory,
    final_traj: &Trajectory,
    obstacles: &[SemanticGrid],
    footprint: (f64, f64),
) -> Result<PlanLoss> {
    if candidate_costs.is_empty() {
        return Err(Error::Empty("candidate costs"));
    }
    if expert.len() != final_traj.len() {
        return Err(Error::LengthMismatch(expert.len(), final_traj.len()));
    }
    if obstacles.len() < final_traj.len() {
        return Err(Error::LengthMismatch(final_traj.len(), obstacles.len()));
    }
    if let Some(g) = obstacles.first() {
        let (x, y) = (g.config().x_range(), g.config().y_range());
        if let Some(p) = expert
            .waypoints
            .iter()
            .find(|p| !(p[0] >= x.0 && p[0] <= x.1 && p[1] >= y.0 && p[1] <= y.1))
        {
            return Err(Error::InvalidScenario(format!("expert waypoint {p:?} outside the grid")));
        }
    }

    let mut best = 0;
    for (i, &c) in candidate_costs.iter().enumerate() {
        if c < candidate_costs[best] {
            best = i;
        }
    }
    let gap = expert_cost - candidate_costs[best];
    let margin = gap.max(0.0);
    let mut grad_candidate_costs = vec![0.0; candidate_costs.len()];
    let mut grad_expert_cost = 0.0;
    if gap > 0.0 {
        grad_expert_cost = 1.0;
        grad_candidate_costs[best] = -1.0;
    }

    let n = final_traj.len().max(1) as f64;
    let mut l2 = 0.0;
    let mut grad_final = Vec::with_capacity(final_traj.len());
    for (a, b) in final_traj.waypoints.iter().zip(&expert.waypoints) {
        let d = [a[0] - b[0], a[1] - b[1]];
        l2 += (d[0] * d[0] + d[1] * d[1]) / n;
        grad_final.push([2.0 * d[0] / n, 2.0 * d[1] / n]);
    }

    let collisions = final_traj
        .waypoints
        .iter()
        .zip(final_traj.headings())
        .zip(obstacles)
        .filter(|((wp, heading), g)| footprint_hits(g, **wp, *heading, footprint, &category::OBSTACLES))
        .count();

    Ok(PlanLoss {
        value: margin + l2 + collisions as f64,
        margin,
        l2,
        collisions,
        grad_candidate_costs,
        grad_expert_cost,
        grad_final,
    })
}
