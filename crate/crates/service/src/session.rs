//! Session state machine, independent of the transport.

use std::path::{Path, PathBuf};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use occplan_core::action::{ActionCondition, Command};
use occplan_core::decoder::WorldDecoder;
use occplan_core::grid::{category, write_dump, EgoPose};
use occplan_core::planner::{closed_loop_rollout, PlanStep, PlannerNet, WorldModel};
use occplan_core::synthworld::{GridFrame, Scenario};
use occplan_core::world::{NeuralWorld, OracleWorld, WorldKind};
use occplan_core::EngineConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Wire error `{code, detail}` plus the HTTP status it maps to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub detail: String,
    #[serde(skip)]
    pub status: u16,
}

impl ApiError {
    pub fn new(status: u16, code: &str, detail: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            detail: detail.into(),
            status,
        }
    }

    pub fn not_found(detail: impl Into<String>) -> Self {
        Self::new(404, "not_found", detail)
    }

    pub fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(400, "bad_request", detail)
    }

    pub fn bad_action(detail: impl Into<String>) -> Self {
        Self::new(400, "bad_action", detail)
    }

    pub fn bad_step(detail: impl Into<String>) -> Self {
        Self::new(400, "bad_step", detail)
    }

    pub fn internal(detail: impl Into<String>) -> Self {
        Self::new(500, "internal", detail)
    }
}

impl From<occplan_core::Error> for ApiError {
    fn from(e: occplan_core::Error) -> Self {
        ApiError::internal(e.to_string())
    }
}

pub type ApiResult<T> = Result<T, ApiError>;

/// What drove one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum StepAction {
    Manual { action: ActionCondition },
    Planner { command: Command },
}

impl StepAction {
    /// Accepts `{"action": {...ActionCondition}}` or
    /// `{"action": "planner", "command": "left"}` (command defaults to forward).
    pub fn from_request(body: &Value) -> ApiResult<Self> {
        let action = body
            .get("action")
            .ok_or_else(|| ApiError::bad_action("missing field \"action\""))?;
        if action.as_str() == Some("planner") {
            let command = match body.get("command") {
                None | Some(Value::Null) => Command::Forward,
                Some(Value::String(s)) => s.parse().map_err(|e: String| ApiError::bad_action(e))?,
                Some(other) => return Err(ApiError::bad_action(format!("command must be a string, got {other}"))),
            };
            return Ok(StepAction::Planner { command });
        }
        let parsed: ActionCondition =
            serde_json::from_value(action.clone()).map_err(|e| ApiError::bad_action(e.to_string()))?;
        parsed.validate().map_err(|e| ApiError::bad_action(e.to_string()))?;
        Ok(StepAction::Manual { action: parsed })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub gmo_voxels: usize,
    /// Mean backward flow over GMO voxels (zero if none).
    pub mean: [f64; 3],
    pub max_norm: f64,
}

/// What the UI draws for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePayload {
    pub v: u32,
    pub step: usize,
    /// World frame index.
    pub t: usize,
    /// BEV raster size `[h, w]`.
    pub dims: [usize; 2],
    /// Top-down label per cell, row-major.
    pub bev: Vec<u8>,
    pub flow: FlowSummary,
    pub ego_pose: EgoPose,
    pub action: Option<StepAction>,
    pub plan: Option<PlanStep>,
    /// SHA-256 of the full grid dump.
    pub checksum: String,
    /// Base64 grid dump, only on full downloads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
struct StoredFrame {
    payload: FramePayload,
    dump: Vec<u8>,
}

fn store_frame(step: usize, frame: &GridFrame, action: Option<StepAction>, plan: Option<PlanStep>) -> ApiResult<StoredFrame> {
    let mut dump = Vec::new();
    write_dump(&mut dump, &frame.semantic, Some(&frame.flow), Some(&frame.instances))?;
    let cfg = frame.semantic.config();
    let (mut n, mut sum, mut max_norm) = (0usize, [0.0f64; 3], 0.0f64);
    for (idx, &l) in frame.semantic.labels().iter().enumerate() {
        if category::is_gmo(l) {
            let v = frame.flow.get(idx);
            n += 1;
            for a in 0..3 {
                sum[a] += v[a];
            }
            max_norm = max_norm.max((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt());
        }
    }
    let mean = if n == 0 { [0.0; 3] } else { sum.map(|s| s / n as f64) };
    Ok(StoredFrame {
        payload: FramePayload {
            v: SCHEMA_VERSION,
            step,
            t: frame.t,
            dims: [cfg.h(), cfg.w()],
            bev: frame.semantic.bev_projection(),
            flow: FlowSummary {
                gmo_voxels: n,
                mean,
                max_norm,
            },
            ego_pose: frame.ego_pose_world,
            action,
            plan,
            checksum: format!("{:x}", Sha256::digest(&dump)),
            grid: None,
        },
        dump,
    })
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
enum WorldState {
    Oracle(OracleWorld),
    Neural(NeuralWorld<f32>, PlannerNet<f32>),
}

/// How a session was created; enough to rebuild it from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOrigin {
    pub scenario: Scenario,
    pub world: WorldKind,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub id: String,
    pub origin: SessionOrigin,
    /// Parent session id and branch step.
    pub parent: Option<(String, usize)>,
    pub children: Vec<String>,
    config: EngineConfig,
    world: WorldState,
    log: Vec<StepAction>,
    frames: Vec<StoredFrame>,
}

impl Session {
    pub fn create(id: String, origin: SessionOrigin, config: &EngineConfig) -> ApiResult<Self> {
        let (world, first) = match origin.world {
            WorldKind::Oracle => {
                let w = OracleWorld::new(origin.scenario.clone(), config.grid)
                    .map_err(|e| ApiError::bad_request(e.to_string()))?;
                let f = w.current_frame()?;
                (WorldState::Oracle(w), f)
            }
            WorldKind::Neural => {
                let mut dcfg = config.decoder.clone();
                dcfg.seed = origin.seed;
                let dec = WorldDecoder::<f32>::seeded(dcfg, config.grid)?;
                let net = PlannerNet::seeded(
                    config.decoder.channels,
                    config.planner.refine_hidden,
                    config.planner.horizon,
                    origin.seed,
                );
                let w = NeuralWorld::from_scenario(origin.scenario.clone(), dec)
                    .map_err(|e| ApiError::bad_request(e.to_string()))?;
                let f = WorldModel::<f32>::ground_truth(&w)?
                    .ok_or_else(|| ApiError::internal("neural world lost its scenario"))?;
                (WorldState::Neural(w, net), f)
            }
        };
        Ok(Self {
            id,
            origin,
            parent: None,
            children: Vec::new(),
            config: config.clone(),
            world,
            log: Vec::new(),
            frames: vec![store_frame(0, &first, None, None)?],
        })
    }

    /// Latest step index.
    pub fn current_step(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn actions(&self) -> &[StepAction] {
        &self.log
    }

    pub fn step(&mut self, action: StepAction) -> ApiResult<FramePayload> {
        let (frame, plan) = match (action, &mut self.world) {
            (StepAction::Manual { action }, WorldState::Oracle(w)) => (WorldModel::<f64>::advance(w, &[action])?, None),
            (StepAction::Manual { action }, WorldState::Neural(w, _)) => (w.advance(&[action])?, None),
            (StepAction::Planner { command }, WorldState::Oracle(w)) => {
                let r = closed_loop_rollout::<f64, _>(w, &[command], None, &self.config.planner)?;
                planned(r)
            }
            (StepAction::Planner { command }, WorldState::Neural(w, net)) => {
                let r = closed_loop_rollout(w, &[command], Some(&*net), &self.config.planner)?;
                planned(r)
            }
        };
        let stored = store_frame(self.frames.len(), &frame, Some(action), plan)?;
        let payload = stored.payload.clone();
        self.log.push(action);
        self.frames.push(stored);
        Ok(payload)
    }

    pub fn frame(&self, step: usize, full: bool) -> ApiResult<FramePayload> {
        let f = self
            .frames
            .get(step)
            .ok_or_else(|| ApiError::not_found(format!("session {} has no step {step}", self.id)))?;
        let mut p = f.payload.clone();
        if full {
            p.grid = Some(base64::engine::general_purpose::STANDARD.encode(&f.dump));
        }
        Ok(p)
    }

    /// Replays this session's first `at` actions into a fresh session.
    pub fn branch(&self, id: String, at: usize) -> ApiResult<Self> {
        if at > self.current_step() {
            return Err(ApiError::bad_step(format!(
                "branch step {at} is beyond current step {}",
                self.current_step()
            )));
        }
        let mut child = Session::create(id, self.origin.clone(), &self.config)?;
        for &a in &self.log[..at] {
            child.step(a)?;
        }
        child.parent = Some((self.id.clone(), at));
        Ok(child)
    }
}

fn planned(r: occplan_core::planner::ClosedLoop) -> (GridFrame, Option<PlanStep>) {
    let mut frames = r.frames;
    let mut steps = r.steps;
    (frames.remove(0), Some(steps.remove(0)))
}

/// Resolves `"name"` to `<dir>/name.json` (or `<dir>/name` if it already ends in `.json`).
pub fn resolve_scenario(dir: Option<&Path>, name: &str) -> ApiResult<Scenario> {
    let dir = dir.ok_or_else(|| ApiError::not_found("no scenario directory configured"))?;
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(ApiError::not_found(format!("unknown scenario {name:?}")));
    }
    let file = if name.ends_with(".json") {
        name.to_string()
    } else {
        format!("{name}.json")
    };
    let path: PathBuf = dir.join(file);
    if !path.is_file() {
        return Err(ApiError::not_found(format!("unknown scenario {name:?}")));
    }
    Scenario::load(&path).map_err(|e| ApiError::bad_request(format!("scenario {name:?}: {e}")))
}
