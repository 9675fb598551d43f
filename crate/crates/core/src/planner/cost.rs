use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{category, GridConfig, SemanticGrid};
use crate::scalar::Scalar;
use crate::tensor::{bilinear_sample_2d, dims3, Linear, Tensor};

use super::{CostWeights, PlannerConfig, Trajectory, TrajectoryCandidateSet};

const EDGE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub agent: f64,
    pub road: f64,
    pub volume: f64,
    pub total: f64,
    /// Per step.
    pub hard_collision: Vec<bool>,
}

impl CostBreakdown {
    pub fn collides(&self) -> bool {
        self.hard_collision.iter().any(|&c| c)
    }
}

/// Position of `p` in the frame of a box centred at `center` with `heading`.
fn to_local(p: [f64; 2], center: [f64; 2], heading: f64) -> [f64; 2] {
    let (s, c) = heading.sin_cos();
    let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
    [c * dx + s * dy, -s * dx + c * dy]
}

/// Grid columns whose centres lie inside the oriented footprint.
pub(crate) fn footprint_cells(
    cfg: &GridConfig,
    center: [f64; 2],
    heading: f64,
    footprint: (f64, f64),
) -> Vec<(usize, usize)> {
    let (hl, hw) = (0.5 * footprint.0, 0.5 * footprint.1);
    let (s, c) = heading.sin_cos();
    let ex = (c * hl).abs() + (s * hw).abs();
    let ey = (s * hl).abs() + (c * hw).abs();
    let r = cfg.resolution();
    let (x0, y0) = (cfg.x_range().0, cfg.y_range().0);
    let lo = |v: f64, o: f64| ((v - o) / r - 0.5).floor().max(0.0) as usize;
    let hi = |v: f64, o: f64, n: usize| (((v - o) / r - 0.5).ceil().max(-1.0) as i64).min(n as i64 - 1);
    let (i1, j1) = (hi(center[0] + ex, x0, cfg.h()), hi(center[1] + ey, y0, cfg.w()));
    let mut out = Vec::new();
    if i1 < 0 || j1 < 0 {
        return out;
    }
    for i in lo(center[0] - ex, x0)..=i1 as usize {
        for j in lo(center[1] - ey, y0)..=j1 as usize {
            let l = to_local(cfg.cell_center(i as i64, j as i64), center, heading);
            if l[0].abs() <= hl + EDGE_EPS && l[1].abs() <= hw + EDGE_EPS {
                out.push((i, j));
            }
        }
    }
    out
}

/// Whether the oriented footprint covers a column holding any of `cats`.
pub fn footprint_hits(
    grid: &SemanticGrid,
    center: [f64; 2],
    heading: f64,
    footprint: (f64, f64),
    cats: &[u8],
) -> bool {
    footprint_cells(grid.config(), center, heading, footprint)
        .into_iter()
        .any(|(i, j)| grid.column(i, j).iter().any(|l| cats.contains(l)))
}

/// Per-grid data the cost terms read, extracted once per planning step.
struct GridFeatures {
    gmo_points: Vec<[f64; 2]>,
    drivable: Vec<bool>,
    cfg: GridConfig,
}

impl GridFeatures {
    fn new(g: &SemanticGrid) -> Self {
        let cfg = *g.config();
        let gmo = g.column_mask(&category::GMO);
        let gmo_points = gmo
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(col, _)| cfg.cell_center((col / cfg.w()) as i64, (col % cfg.w()) as i64))
            .collect();
        Self {
            gmo_points,
            drivable: g.column_mask(&[category::DRIVABLE]),
            cfg,
        }
    }
}

fn check_steps(traj: &Trajectory, n_grids: usize) -> Result<()> {
    if n_grids < traj.len() {
        return Err(Error::LengthMismatch(traj.len(), n_grids));
    }
    Ok(())
}

fn agent_terms(
    traj: &Trajectory,
    feats: &[GridFeatures],
    footprint: (f64, f64),
    w: &CostWeights,
) -> (f64, Vec<bool>) {
    let (hl, hw) = (0.5 * footprint.0, 0.5 * footprint.1);
    let (bx, by) = (hl + w.longitudinal_margin, hw + w.lateral_margin);
    let mut cost = 0.0;
    let mut flags = Vec::with_capacity(traj.len());
    for ((wp, heading), f) in traj.waypoints.iter().zip(traj.headings()).zip(feats) {
        let mut hard = false;
        for &p in &f.gmo_points {
            let l = to_local(p, *wp, heading);
            let (ax, ay) = (l[0].abs(), l[1].abs());
            if ax > bx + EDGE_EPS || ay > by + EDGE_EPS {
                continue;
            }
            if ax <= hl + EDGE_EPS && ay <= hw + EDGE_EPS {
                hard = true;
            }
            let d = (ax - hl).max(0.0).hypot((ay - hw).max(0.0));
            cost += (-d / w.sigma).exp();
        }
        if hard {
            cost += w.hard_penalty;
        }
        flags.push(hard);
    }
    (cost, flags)
}

fn road_terms(traj: &Trajectory, feats: &[GridFeatures], footprint: (f64, f64)) -> f64 {
    traj.waypoints
        .iter()
        .zip(traj.headings())
        .zip(feats)
        .map(|((wp, heading), f)| {
            let cells = footprint_cells(&f.cfg, *wp, heading, footprint);
            if cells.is_empty() {
                return 1.0;
            }
            let off = cells
                .iter()
                .filter(|&&(i, j)| !f.drivable[i * f.cfg.w() + j])
                .count();
            off as f64 / cells.len() as f64
        })
        .sum()
}

/// Agent-safety cost summed over steps, with per-step hard-collision flags.
/// Step `k` is checked against `future[k]`.
pub fn agent_safety_cost(
    traj: &Trajectory,
    future: &[SemanticGrid],
    footprint: (f64, f64),
    weights: &CostWeights,
) -> Result<(f64, Vec<bool>)> {
    check_steps(traj, future.len())?;
    let feats: Vec<GridFeatures> = future[..traj.len()].iter().map(GridFeatures::new).collect();
    Ok(agent_terms(traj, &feats, footprint, weights))
}

/// Sum over steps of the fraction of footprint columns without drivable
/// surface. A footprint entirely outside the grid counts as off-road.
pub fn road_safety_cost(traj: &Trajectory, future: &[SemanticGrid], footprint: (f64, f64)) -> Result<f64> {
    check_steps(traj, future.len())?;
    let feats: Vec<GridFeatures> = future[..traj.len()].iter().map(GridFeatures::new).collect();
    Ok(road_terms(traj, &feats, footprint))
}

fn cost_map<T: Scalar>(bev: &Tensor<T>, head: &Linear<T>) -> Result<Tensor<T>> {
    dims3(bev, "volume cost bev")?;
    if head.outputs() != 1 {
        return Err(Error::InvalidConfig("volume head must have one output".into()));
    }
    head.forward(bev)
}

fn volume_from_map<T: Scalar>(map: &Tensor<T>, cfg: &GridConfig, traj: &Trajectory) -> Result<f64> {
    let points: Vec<[f64; 2]> = traj.waypoints.iter().map(|&w| cfg.fractional_cell(w)).collect();
    Ok(bilinear_sample_2d(map, &points)?.sum())
}

/// Sum of the learned cost map bilinearly sampled at each waypoint.
pub fn learned_volume_cost<T: Scalar>(
    traj: &Trajectory,
    bev: &Tensor<T>,
    cfg: &GridConfig,
    head: &Linear<T>,
) -> Result<f64> {
    volume_from_map(&cost_map(bev, head)?, cfg, traj)
}

/// Cost breakdown of every candidate. `volume` is the BEV embedding and cost
/// head; without it the volume term is 0.
pub fn evaluate_candidates<T: Scalar>(
    set: &TrajectoryCandidateSet,
    future: &[SemanticGrid],
    volume: Option<(&Tensor<T>, &Linear<T>)>,
    cfg: &PlannerConfig,
) -> Result<Vec<CostBreakdown>> {
    let steps = set.candidates.iter().map(Trajectory::len).max().unwrap_or(0);
    if future.len() < steps {
        return Err(Error::LengthMismatch(steps, future.len()));
    }
    let feats: Vec<GridFeatures> = future[..steps].iter().map(GridFeatures::new).collect();
    let map = volume.map(|(bev, head)| cost_map(bev, head)).transpose()?;
    let w = &cfg.weights;
    set.candidates
        .iter()
        .map(|traj| {
            let (agent, hard_collision) = agent_terms(traj, &feats, cfg.footprint, w);
            let road = road_terms(traj, &feats, cfg.footprint);
            let volume = match &map {
                Some(m) => volume_from_map(m, future[0].config(), traj)?,
                None => 0.0,
            };
            Ok(CostBreakdown {
                agent,
                road,
                volume,
                total: w.w_a * agent + w.w_r * road + w.w_v * volume,
                hard_collision,
            })
        })
        .collect()
}

/// Argmin of total cost over collision-free candidates, or over all when
/// every candidate collides. Ties go to the lowest index.
pub fn select_index(costs: &[CostBreakdown]) -> Result<usize> {
    if costs.is_empty() {
        return Err(Error::Empty("candidate costs"));
    }
    let any_free = costs.iter().any(|c| !c.collides());
    let mut best: Option<usize> = None;
    for (i, c) in costs.iter().enumerate() {
        if any_free && c.collides() {
            continue;
        }
        if best.is_none_or(|b| c.total < costs[b].total) {
            best = Some(i);
        }
    }
    Ok(best.expect("at least one eligible candidate"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub trajectory: Trajectory,
    pub costs: Vec<CostBreakdown>,
}

pub fn select_trajectory<T: Scalar>(
    set: &TrajectoryCandidateSet,
    future: &[SemanticGrid],
    volume: Option<(&Tensor<T>, &Linear<T>)>,
    cfg: &PlannerConfig,
) -> Result<Selection> {
    if set.is_empty() {
        return Err(Error::NoCandidates(set.command.name()));
    }
    let costs = evaluate_candidates(set, future, volume, cfg)?;
    let index = select_index(&costs)?;
    Ok(Selection {
        index,
        trajectory: set.candidates[index].clone(),
        costs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::Command;
    use crate::planner::sample_trajectories;

    fn grid_cfg() -> GridConfig {
        GridConfig::new((-8.0, 8.0), (-8.0, 8.0), (-1.0, 1.0), 0.5).unwrap()
    }

    fn with_column(cfg: GridConfig, cells: &[(usize, usize)], label: u8) -> SemanticGrid {
        let mut g = SemanticGrid::free(cfg);
        for &(i, j) in cells {
            g.set([i, j, cfg.d() - 1], label);
        }
        g
    }

    fn cell_at(cfg: &GridConfig, p: [f64; 2]) -> (usize, usize) {
        let c = cfg.world_to_cell(p).unwrap();
        (c[0], c[1])
    }

    fn one_step(p: [f64; 2]) -> Trajectory {
        Trajectory::new(vec![p], 0.5).unwrap()
    }

    #[test]
    fn empty_future_costs_nothing() {
        let cfg = grid_cfg();
        let traj = one_step([1.0, 0.0]);
        let (c, hard) =
            agent_safety_cost(&traj, &[SemanticGrid::free(cfg)], (4.0, 1.8), &CostWeights::default()).unwrap();
        assert_eq!(c, 0.0);
        assert_eq!(hard, vec![false]);
        assert!(agent_safety_cost(&traj, &[], (4.0, 1.8), &CostWeights::default()).is_err());
    }

    #[test]
    fn centred_voxel_is_hard() {
        let cfg = grid_cfg();
        let g = with_column(cfg, &[cell_at(&cfg, [2.25, 0.25])], category::VEHICLE);
        let (c, hard) =
            agent_safety_cost(&one_step([2.25, 0.25]), &[g], (4.0, 1.8), &CostWeights::default()).unwrap();
        assert_eq!(hard, vec![true]);
        assert_eq!(c, 1e3 + 1.0);
    }

    #[test]
    fn margin_boundary_soft_only() {
        let cfg = grid_cfg();
        // footprint half length 2 + longitudinal margin 2 = 4 ahead of the waypoint
        let g = with_column(cfg, &[cell_at(&cfg, [4.25, 0.25])], category::PEDESTRIAN);
        let w = CostWeights::default();
        let (c, hard) = agent_safety_cost(&one_step([0.25, 0.0]), &[g.clone()], (4.0, 1.8), &w).unwrap();
        assert_eq!(hard, vec![false]);
        assert!((c - (-2.0f64 / 0.5).exp()).abs() < 1e-12, "{c}");
        // just outside the box: nothing
        let (c, _) = agent_safety_cost(&one_step([0.0, 0.0]), &[g], (4.0, 1.8), &w).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn road_fractions() {
        let cfg = grid_cfg();
        let traj = one_step([0.0, 0.0]);
        let all: Vec<(usize, usize)> = (0..cfg.h()).flat_map(|i| (0..cfg.w()).map(move |j| (i, j))).collect();
        let mut road = SemanticGrid::free(cfg);
        for &(i, j) in &all {
            road.set([i, j, 0], category::DRIVABLE);
        }
        assert_eq!(road_safety_cost(&traj, &[road], (4.0, 2.0)).unwrap(), 0.0);
        let off = SemanticGrid::free(cfg);
        let two = Trajectory::new(vec![[0.0, 0.0], [0.0, 0.0]], 0.5).unwrap();
        assert_eq!(road_safety_cost(&two, &[off.clone(), off], (4.0, 2.0)).unwrap(), 2.0);
        // drivable only for y > 0: the 4 x 2 footprint splits evenly
        let mut half = SemanticGrid::free(cfg);
        for &(i, j) in &all {
            if cfg.cell_center(i as i64, j as i64)[1] > 0.0 {
                half.set([i, j, 0], category::DRIVABLE);
            }
        }
        assert_eq!(road_safety_cost(&traj, &[half], (4.0, 2.0)).unwrap(), 0.5);
    }

    #[test]
    fn volume_cost() {
        let cfg = GridConfig::new((-2.0, 2.0), (-2.0, 2.0), (-1.0, 1.0), 1.0).unwrap();
        let bev: Tensor<f64> = crate::tensor::SeededInit::uniform(1, 1.0).tensor(vec![4, 4, 3]);
        let traj = Trajectory::new(vec![[0.5, 0.5], [9.0, 9.0], [-1.0, -1.5]], 0.5).unwrap();
        assert_eq!(learned_volume_cost(&traj, &bev, &cfg, &Linear::zeros(3, 1)).unwrap(), 0.0);
        let mut ones = Linear::<f64>::zeros(3, 1);
        ones.bias.data_mut()[0] = 1.0;
        assert_eq!(learned_volume_cost(&traj, &bev, &cfg, &ones).unwrap(), 2.0);
        // one hot cell of value 10; halfway to its zero neighbour gives 5
        let mut hot = Linear::<f64>::zeros(1, 1);
        hot.weight.data_mut()[0] = 1.0;
        let mut map = Tensor::<f64>::zeros(vec![4, 4, 1]);
        map.set(&[2, 2, 0], 10.0);
        let mid = Trajectory::new(vec![[0.5, 1.0]], 0.5).unwrap();
        assert!((learned_volume_cost(&mid, &map, &cfg, &hot).unwrap() - 5.0).abs() < 1e-12);
    }

    fn breakdown(total: f64, hard: bool) -> CostBreakdown {
        CostBreakdown {
            agent: 0.0,
            road: 0.0,
            volume: 0.0,
            total,
            hard_collision: vec![hard],
        }
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_index(&[breakdown(50.0, true)]).unwrap(), 0);
        assert_eq!(select_index(&[breakdown(1.0, true), breakdown(9.0, false)]).unwrap(), 1);
        assert_eq!(select_index(&[breakdown(2.0, false), breakdown(2.0, false)]).unwrap(), 0);
        assert_eq!(select_index(&[breakdown(3.0, true), breakdown(2.0, true)]).unwrap(), 1);
        assert!(select_index(&[]).is_err());
    }

    #[test]
    fn hard_exclusion_end_to_end() {
        let cfg = grid_cfg();
        let p = PlannerConfig::default();
        let set = sample_trajectories(Command::Forward, &[4.0, 1.0], &[0.0], 0.01, 1, 0.5).unwrap();
        // vehicle inside the fast candidate's footprint at (2, 0), only near the slow one
        let g = with_column(cfg, &[cell_at(&cfg, [3.75, 0.25])], category::VEHICLE);
        let sel = select_trajectory::<f64>(&set, &[g], None, &p).unwrap();
        assert_eq!(sel.index, 1);
        assert!(sel.costs[0].collides() && !sel.costs[1].collides());
        assert!(sel.costs[1].total > 0.0);
    }

    #[test]
    fn footprint_cells_rotate() {
        let cfg = grid_cfg();
        let a = footprint_cells(&cfg, [0.0, 0.0], 0.0, (4.0, 2.0));
        let b = footprint_cells(&cfg, [0.0, 0.0], std::f64::consts::FRAC_PI_2, (4.0, 2.0));
        assert_eq!(a.len(), 8 * 4);
        assert_eq!(b.len(), 8 * 4);
        assert!(b.iter().all(|&(i, j)| {
            let c = cfg.cell_center(i as i64, j as i64);
            c[0].abs() < 1.0 && c[1].abs() < 2.0
        }));
        assert!(footprint_cells(&cfg, [100.0, 0.0], 0.0, (4.0, 2.0)).is_empty());
    }
}
