//! Kinematic scenarios and their ground-truth occupancy.

mod scenario;

pub use scenario::{
    corridor_band, generate_random_scenario, step_agents, AgentSpec, Difficulty, Rect, Scenario,
    CORRIDOR_LOOKAHEAD,
};

use serde::{Deserialize, Serialize};

use crate::action::ActionCondition;
use crate::error::{Error, Result};
use crate::grid::{category, EgoPose, FlowGrid, GridConfig, InstanceGrid, SemanticGrid};

/// Ground truth for one frame, expressed in the ego frame of that frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFrame {
    pub t: usize,
    pub semantic: SemanticGrid,
    pub flow: FlowGrid,
    pub instances: InstanceGrid,
    pub ego_pose_world: EgoPose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterOptions {
    /// Extra margin (meters) added around agent boxes; 0 gives fine-grained labels.
    pub gmo_dilation: f64,
    /// Static obstacles fill layers from the ground slab up to this height.
    pub static_height: f64,
}

impl Default for RasterOptions {
    fn default() -> Self {
        Self {
            gmo_dilation: 0.0,
            static_height: 2.0,
        }
    }
}

const EDGE_EPS: f64 = 1e-9;

fn check_fits(scn: &Scenario, cfg: &GridConfig) -> Result<()> {
    let (hl, hw) = (0.5 * scn.ego_footprint.0, 0.5 * scn.ego_footprint.1);
    let (x, y) = (cfg.x_range(), cfg.y_range());
    if x.0 > -hl || x.1 < hl || y.0 > -hw || y.1 < hw {
        return Err(Error::GridTooSmall(format!(
            "ego footprint {:?} does not fit x {:?} y {:?}",
            scn.ego_footprint, x, y
        )));
    }
    Ok(())
}

/// Rasterizes frame `t` with default options.
pub fn rasterize_frame(
    scn: &Scenario,
    t: usize,
    ego_pose: &EgoPose,
    cfg: &GridConfig,
) -> Result<GridFrame> {
    rasterize_frame_with(scn, t, ego_pose, cfg, &RasterOptions::default())
}

/// Labels voxels by center containment; later agents overwrite earlier ones.
pub fn rasterize_frame_with(
    scn: &Scenario,
    t: usize,
    ego_pose: &EgoPose,
    cfg: &GridConfig,
    opts: &RasterOptions,
) -> Result<GridFrame> {
    check_fits(scn, cfg)?;
    let (h, w, d) = cfg.dims();
    let ground = cfg.ground_layer();
    let layer_z: Vec<f64> = (0..d).map(|k| cfg.voxel_to_world([0, 0, k])[2]).collect();
    let static_top = (ground..d)
        .take_while(|&k| k == ground || layer_z[k] <= opts.static_height + EDGE_EPS)
        .last()
        .unwrap_or(ground);

    let poses = scn.step_agents(t);
    let prev = if t == 0 {
        poses.clone()
    } else {
        scn.step_agents(t - 1)
    };
    let agent_frames: Vec<EgoPose> = poses.iter().map(|p| p.inverse()).collect();
    let agent_layers: Vec<Vec<usize>> = scn
        .agents
        .iter()
        .map(|a| {
            (0..d)
                .filter(|&k| {
                    layer_z[k] >= a.z_extent.0 - EDGE_EPS && layer_z[k] <= a.z_extent.1 + EDGE_EPS
                })
                .collect()
        })
        .collect();

    let mut labels = vec![category::FREE; cfg.len()];
    let mut flow = vec![0f32; 3 * cfg.len()];
    let mut ids = vec![0u16; cfg.len()];

    for i in 0..h {
        for j in 0..w {
            let c = cfg.cell_center(i as i64, j as i64);
            let pw = ego_pose.apply(c);
            let base = cfg.index(i, j, 0);
            if scn.drivable.iter().any(|r| r.contains(pw)) {
                labels[base + ground] = category::DRIVABLE;
            }
            if scn.static_obstacles.iter().any(|r| r.contains(pw)) {
                for k in ground..=static_top {
                    labels[base + k] = category::STATIC;
                }
            }
            for (a_idx, a) in scn.agents.iter().enumerate() {
                let local = agent_frames[a_idx].apply(pw);
                let hl = 0.5 * a.footprint.0 + opts.gmo_dilation + EDGE_EPS;
                let hw = 0.5 * a.footprint.1 + opts.gmo_dilation + EDGE_EPS;
                if local[0].abs() > hl || local[1].abs() > hw {
                    continue;
                }
                let p = prev[a_idx];
                let dxy = ego_pose.unrotate([p.x - pw[0], p.y - pw[1]]);
                for &k in &agent_layers[a_idx] {
                    let idx = base + k;
                    labels[idx] = a.category;
                    ids[idx] = a.id;
                    flow[3 * idx] = dxy[0] as f32;
                    flow[3 * idx + 1] = dxy[1] as f32;
                    flow[3 * idx + 2] = (a.center_z() - layer_z[k]) as f32;
                }
            }
        }
    }

    Ok(GridFrame {
        t,
        semantic: SemanticGrid::new(*cfg, labels)?,
        flow: FlowGrid::new(*cfg, flow)?,
        instances: InstanceGrid::new(*cfg, ids)?,
        ego_pose_world: *ego_pose,
    })
}

/// Frames `t0+1 ..= t0+n` for `n` actions, rasterized in the ego frame reached
/// by accumulating the actions from `ego_pose_t0`. Agents ignore the ego.
pub fn oracle_forecast(
    scn: &Scenario,
    t0: usize,
    ego_pose_t0: &EgoPose,
    ego_actions: &[ActionCondition],
    cfg: &GridConfig,
) -> Result<Vec<GridFrame>> {
    let motions = ego_actions
        .iter()
        .map(|a| match a {
            ActionCondition::Command { .. } | ActionCondition::Curvature { .. } => {
                Err(Error::NonConvertibleAction {
                    kind: a.kind_name(),
                })
            }
            _ => {
                a.validate()?;
                a.ego_motion(scn.dt)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pose = *ego_pose_t0;
    motions
        .iter()
        .enumerate()
        .map(|(k, m)| {
            pose = pose.compose(m);
            rasterize_frame(scn, t0 + k + 1, &pose, cfg)
        })
        .collect()
}

/// Checks by rasterization that the straight lane ahead of `ego0` stays clear
/// of obstacles and on the road for `horizon + CORRIDOR_LOOKAHEAD` frames.
///
/// Uses its own finer grid so it does not share the planner's discretization.
pub fn feasibility_oracle(scn: &Scenario) -> Result<bool> {
    let res = 0.4;
    let (len, width) = scn.ego_footprint;
    let reach = len * scn.horizon as f64 + 0.5 * len;
    let x_max = ((reach + 8.0) / res).ceil() * res;
    let y_max = ((0.5 * width + 6.0) / res).ceil() * res;
    let cfg = GridConfig::new((-8.0, x_max), (-y_max, y_max), (-1.6, 4.8), res)?;
    let band = Rect::new(-0.5 * len, -0.5 * width, reach, 0.5 * width);
    let ground = cfg.ground_layer();
    for t in 0..=scn.horizon + CORRIDOR_LOOKAHEAD {
        let frame = rasterize_frame(scn, t, &scn.ego0, &cfg)?;
        let (h, w, _) = cfg.dims();
        for i in 0..h {
            for j in 0..w {
                if !band.contains(cfg.cell_center(i as i64, j as i64)) {
                    continue;
                }
                let col = frame.semantic.column(i, j);
                if col.iter().any(|&l| category::OBSTACLES.contains(&l)) {
                    return Ok(false);
                }
                if t == 0 && col[ground] != category::DRIVABLE {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}
