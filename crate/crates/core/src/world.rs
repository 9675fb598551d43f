//! The two forecasting worlds: the synthetic oracle and the neural decoder.

use serde::{Deserialize, Serialize};

use crate::action::{implied_motion, ActionCondition};
use crate::decoder::{decode_next, memory_push, rollout_steps, warm_up, MemoryQueue, PushContext, WorldDecoder};
use crate::error::{Error, Result};
use crate::grid::{EgoPose, GridConfig, InstanceGrid};
use crate::neural::{flow_to_grid, logits_to_semantic};
use crate::planner::{PlanningForecast, WorldModel};
use crate::scalar::Scalar;
use crate::synthworld::{rasterize_frame, rasterize_frame_with, GridFrame, RasterOptions, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorldKind {
    Oracle,
    Neural,
}

impl WorldKind {
    pub fn name(self) -> &'static str {
        match self {
            WorldKind::Oracle => "oracle",
            WorldKind::Neural => "neural",
        }
    }
}

impl std::str::FromStr for WorldKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "oracle" => Ok(WorldKind::Oracle),
            "neural" => Ok(WorldKind::Neural),
            other => Err(format!("unknown world {other:?}")),
        }
    }
}

/// Perfect world model: rasterizes the scenario itself.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleWorld {
    scenario: Scenario,
    grid: GridConfig,
    raster: RasterOptions,
    t: usize,
    pose: EgoPose,
}

impl OracleWorld {
    pub fn new(scenario: Scenario, grid: GridConfig) -> Result<Self> {
        Self::with_options(scenario, grid, RasterOptions::default())
    }

    pub fn with_options(scenario: Scenario, grid: GridConfig, raster: RasterOptions) -> Result<Self> {
        scenario.validate()?;
        let pose = scenario.ego0;
        // fails early when the ego does not fit the grid
        rasterize_frame_with(&scenario, 0, &pose, &grid, &raster)?;
        Ok(Self {
            scenario,
            grid,
            raster,
            t: 0,
            pose,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn current_frame(&self) -> Result<GridFrame> {
        rasterize_frame_with(&self.scenario, self.t, &self.pose, &self.grid, &self.raster)
    }
}

impl<T: Scalar> WorldModel<T> for OracleWorld {
    fn grid(&self) -> &GridConfig {
        &self.grid
    }

    fn time(&self) -> usize {
        self.t
    }

    fn ego_pose(&self) -> EgoPose {
        self.pose
    }

    fn plan_forecast(&mut self, steps: usize) -> Result<PlanningForecast<T>> {
        let grids = (1..=steps)
            .map(|k| Ok(rasterize_frame_with(&self.scenario, self.t + k, &self.pose, &self.grid, &self.raster)?.semantic))
            .collect::<Result<Vec<_>>>()?;
        Ok(PlanningForecast { grids, bev: None })
    }

    fn advance(&mut self, actions: &[ActionCondition]) -> Result<GridFrame> {
        for a in actions {
            a.validate()?;
        }
        self.pose = self.pose.compose(&implied_motion(actions, self.scenario.dt));
        self.t += 1;
        self.current_frame()
    }

    fn ground_truth(&self) -> Result<Option<GridFrame>> {
        self.current_frame().map(Some)
    }
}

/// Learned world: the decoder's memory is the state and its predictions are the frames.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralWorld<T> {
    decoder: WorldDecoder<T>,
    memory: MemoryQueue<T>,
    scenario: Option<Scenario>,
    t: usize,
    pose: EgoPose,
}

impl<T: Scalar> NeuralWorld<T> {
    /// Warms the memory up on ground truth for frames `0..capacity` with the
    /// ego held at its initial pose; the world then starts at the last of them.
    pub fn from_scenario(scenario: Scenario, decoder: WorldDecoder<T>) -> Result<Self> {
        scenario.validate()?;
        let pose = scenario.ego0;
        let frames = (0..decoder.config.memory_capacity)
            .map(|t| rasterize_frame(&scenario, t, &pose, &decoder.grid))
            .collect::<Result<Vec<_>>>()?;
        Self::from_observations(&frames, decoder, Some(scenario))
    }

    pub fn from_observations(
        frames: &[GridFrame],
        decoder: WorldDecoder<T>,
        scenario: Option<Scenario>,
    ) -> Result<Self> {
        let last = frames.last().ok_or(Error::Empty("observation frames"))?;
        let (t, pose) = (last.t, last.ego_pose_world);
        let memory = warm_up(frames, &decoder)?;
        Ok(Self {
            decoder,
            memory,
            scenario,
            t,
            pose,
        })
    }

    pub fn decoder(&self) -> &WorldDecoder<T> {
        &self.decoder
    }

    pub fn memory(&self) -> &MemoryQueue<T> {
        &self.memory
    }
}

impl<T: Scalar> WorldModel<T> for NeuralWorld<T> {
    fn grid(&self) -> &GridConfig {
        &self.decoder.grid
    }

    fn time(&self) -> usize {
        self.t
    }

    fn ego_pose(&self) -> EgoPose {
        self.pose
    }

    fn plan_forecast(&mut self, steps: usize) -> Result<PlanningForecast<T>> {
        let hold = vec![Vec::new(); steps];
        let r = rollout_steps(&self.memory, &hold, &self.decoder)?;
        let bev = self.memory.last().map(|e| e.features.clone());
        Ok(PlanningForecast {
            grids: r.frames.into_iter().map(|(s, _)| s).collect(),
            bev,
        })
    }

    fn advance(&mut self, actions: &[ActionCondition]) -> Result<GridFrame> {
        let dec = &self.decoder;
        let e = decode_next(&self.memory, actions, dec)?;
        let (logits, flow) = dec.predict(&e.features)?;
        let motion = implied_motion(actions, dec.config.dt);
        let frame = GridFrame {
            t: self.t + 1,
            semantic: logits_to_semantic(&logits, &dec.grid)?,
            flow: flow_to_grid(&flow, &dec.grid)?,
            instances: InstanceGrid::empty(dec.grid),
            ego_pose_world: e.ego_pose_world,
        };
        let ctx = PushContext {
            ego_transform: motion,
            flow,
        };
        self.memory = memory_push(&self.memory, e, &ctx, &dec.memory)?;
        self.t += 1;
        self.pose = frame.ego_pose_world;
        Ok(frame)
    }

    fn ground_truth(&self) -> Result<Option<GridFrame>> {
        self.scenario
            .as_ref()
            .map(|s| rasterize_frame(s, self.t, &self.pose, &self.decoder.grid))
            .transpose()
    }
}
