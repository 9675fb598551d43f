//! Command implementations behind the `occplan` binary.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use occplan_core::action::{ActionCondition, Command};
use occplan_core::decoder::WorldDecoder;
use occplan_core::grid::{read_dump_file, write_dump_file, GridDump};
use occplan_core::metrics::{gmo_probability, gt_tracks, occupancy_report, predicted_tracks, vpq_f, MetricReport};
use occplan_core::neural::{load_checkpoint, write_checkpoint, Parameterized};
use occplan_core::planner::{closed_loop_rollout, PlanStep, PlannerNet, WorldModel};
use occplan_core::synthworld::{feasibility_oracle, generate_random_scenario, Difficulty, GridFrame, Scenario};
use occplan_core::tensor::Tensor;
use occplan_core::world::{NeuralWorld, OracleWorld, WorldKind};
use occplan_core::EngineConfig;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Validation(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<occplan_core::Error> for CliError {
    fn from(e: occplan_core::Error) -> Self {
        match e {
            occplan_core::Error::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn load_config(path: Option<&Path>) -> CliResult<EngineConfig> {
    match path {
        None => Ok(EngineConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            EngineConfig::from_json(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))
        }
    }
}

pub fn load_scenario(path: &Path) -> CliResult<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Scenario::from_json(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Writes `count` scenarios `scenario_000.json`, ... with seeds `seed`, `seed + 1`, ...
pub fn cmd_gen(seed: u64, count: usize, difficulty: Difficulty, out: &Path) -> CliResult<Vec<PathBuf>> {
    create_dir(out)?;
    let mut written = Vec::with_capacity(count);
    for i in 0..count {
        let scn = generate_random_scenario(seed.wrapping_add(i as u64), difficulty);
        if difficulty == Difficulty::Corridor && !feasibility_oracle(&scn)? {
            return Err(CliError::Validation(format!("generated corridor scenario {i} is infeasible")));
        }
        let path = out.join(format!("scenario_{i:03}.json"));
        write_file(&path, scn.to_json()?.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

/// Where each rollout step's action comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionSource {
    Planner,
    File(PathBuf),
    Command(Command),
}

impl std::str::FromStr for ActionSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "planner" {
            return Ok(ActionSource::Planner);
        }
        if let Some(p) = s.strip_prefix("file:") {
            if p.is_empty() {
                return Err("file: needs a path".into());
            }
            return Ok(ActionSource::File(PathBuf::from(p)));
        }
        if let Some(c) = s.strip_prefix("command:") {
            return Ok(ActionSource::Command(c.parse()?));
        }
        Err(format!("unknown action source {s:?} (planner, file:PATH, command:NAME)"))
    }
}

impl fmt::Display for ActionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionSource::Planner => write!(f, "planner"),
            ActionSource::File(p) => write!(f, "file:{}", p.display()),
            ActionSource::Command(c) => write!(f, "command:{}", c.name()),
        }
    }
}

/// Parses an action file: a JSON array with one entry per step, each entry
/// either one action object or an array of them.
pub fn parse_action_file(text: &str) -> CliResult<Vec<Vec<ActionCondition>>> {
    let v: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("action file: {e}")))?;
    let steps = v
        .as_array()
        .ok_or_else(|| CliError::Validation("action file must be a JSON array of steps".into()))?;
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let items: Vec<serde_json::Value> = match s {
                serde_json::Value::Array(a) => a.clone(),
                other => vec![other.clone()],
            };
            items
                .into_iter()
                .map(|item| {
                    let a: ActionCondition = serde_json::from_value(item)
                        .map_err(|e| CliError::Validation(format!("action record {i}: {e}")))?;
                    a.validate()
                        .map_err(|e| CliError::Validation(format!("action record {i}: {e}")))?;
                    Ok(a)
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutputs {
    pub pred_dir: String,
    pub gt_dir: String,
    pub trace: String,
    pub plan: Option<String>,
    pub weights: Option<String>,
}

/// Everything needed to re-run a rollout bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub v: u32,
    pub tool_version: String,
    pub seed: u64,
    pub world: WorldKind,
    pub horizon: usize,
    pub actions: String,
    /// Per-step actions when they were given up front.
    pub action_log: Option<Vec<Vec<ActionCondition>>>,
    pub scenario_path: Option<String>,
    pub scenario: Scenario,
    pub checkpoint: Option<String>,
    pub config: EngineConfig,
    /// Paths relative to the output directory.
    pub outputs: RunOutputs,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        if m.v != MANIFEST_VERSION {
            return Err(CliError::Validation(format!("unsupported manifest version {}", m.v)));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone)]
pub struct RolloutArgs {
    pub scenario: Scenario,
    pub scenario_path: Option<PathBuf>,
    pub world: WorldKind,
    pub actions: ActionSource,
    pub horizon: Option<usize>,
    pub seed: u64,
    pub config: EngineConfig,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
struct TraceStep {
    step: usize,
    t: usize,
    actions: Vec<ActionCondition>,
    ego_pose: occplan_core::grid::EgoPose,
}

#[derive(Debug, Clone, Serialize)]
struct Trace {
    v: u32,
    world: WorldKind,
    steps: Vec<TraceStep>,
}

struct Weights<'a> {
    decoder: &'a mut WorldDecoder<f32>,
    planner: &'a mut PlannerNet<f32>,
}

impl Parameterized<f32> for Weights<'_> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<f32>)) {
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.planner.visit(&join(prefix, "planner"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<f32>)) {
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.planner.visit_mut(&join(prefix, "planner"), f);
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

enum World {
    Oracle(OracleWorld),
    Neural(Box<NeuralWorld<f32>>, Box<PlannerNet<f32>>),
}

fn frame_name(step: usize) -> String {
    format!("frame_{step:03}.ogrd")
}

fn dump_frame(dir: &Path, step: usize, f: &GridFrame) -> CliResult<()> {
    write_dump_file(dir.join(frame_name(step)), &f.semantic, Some(&f.flow), Some(&f.instances))?;
    Ok(())
}

/// Runs a rollout and writes `manifest.json`, `pred/`, `gt/`, `trace.json`,
/// `plan.jsonl` (planner and command sources) and `weights.ckpt` (neural
/// world) into `out`. `command:NAME` runs the planner under that command.
pub fn cmd_rollout(args: &RolloutArgs, out: &Path) -> CliResult<RunManifest> {
    args.config.validate()?;
    let horizon = args.horizon.unwrap_or(args.scenario.horizon);
    if horizon == 0 {
        return Err(CliError::Usage("horizon must be >= 1".into()));
    }
    let action_log: Option<Vec<Vec<ActionCondition>>> = match &args.actions {
        ActionSource::Planner | ActionSource::Command(_) => None,
        ActionSource::File(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let log = parse_action_file(&text)?;
            if log.len() < horizon {
                return Err(CliError::Validation(format!(
                    "action file has {} steps, horizon is {horizon}",
                    log.len()
                )));
            }
            Some(log[..horizon].to_vec())
        }
    };
    rollout_with_log(args, action_log, horizon, out)
}

/// Re-runs a manifest into `out`.
pub fn cmd_rollout_manifest(manifest: &RunManifest, out: &Path) -> CliResult<RunManifest> {
    let actions: ActionSource = manifest.actions.parse().map_err(CliError::Validation)?;
    let args = RolloutArgs {
        scenario: manifest.scenario.clone(),
        scenario_path: manifest.scenario_path.as_ref().map(PathBuf::from),
        world: manifest.world,
        actions,
        horizon: Some(manifest.horizon),
        seed: manifest.seed,
        config: manifest.config.clone(),
        checkpoint: manifest.checkpoint.as_ref().map(PathBuf::from),
    };
    rollout_with_log(&args, manifest.action_log.clone(), manifest.horizon, out)
}

fn rollout_with_log(
    args: &RolloutArgs,
    action_log: Option<Vec<Vec<ActionCondition>>>,
    horizon: usize,
    out: &Path,
) -> CliResult<RunManifest> {
    let cfg = &args.config;
    let command = match args.actions {
        ActionSource::Command(c) => c,
        _ => Command::Forward,
    };
    let mut world = match args.world {
        WorldKind::Oracle => World::Oracle(OracleWorld::with_options(args.scenario.clone(), cfg.grid, cfg.raster)?),
        WorldKind::Neural => {
            let mut dcfg = cfg.decoder.clone();
            dcfg.seed = args.seed;
            let mut decoder = WorldDecoder::<f32>::seeded(dcfg, cfg.grid)?;
            let mut planner =
                PlannerNet::<f32>::seeded(cfg.decoder.channels, cfg.planner.refine_hidden, cfg.planner.horizon, args.seed);
            match &args.checkpoint {
                Some(p) => {
                    let file = std::fs::File::open(p).map_err(|e| io_err(p, e))?;
                    let mut w = Weights {
                        decoder: &mut decoder,
                        planner: &mut planner,
                    };
                    load_checkpoint(&mut w, std::io::BufReader::new(file))?;
                    eprintln!("neural world: weights from {}", p.display());
                }
                None => eprintln!("neural world: seeded random weights, seed {}", args.seed),
            }
            let w = NeuralWorld::from_scenario(args.scenario.clone(), decoder)?;
            World::Neural(Box::new(w), Box::new(planner))
        }
    };

    let pred_dir = out.join("pred");
    let gt_dir = out.join("gt");
    create_dir(&pred_dir)?;
    create_dir(&gt_dir)?;

    let (start_pred, start_gt, start_pose, start_t) = match &world {
        World::Oracle(w) => {
            let f = w.current_frame()?;
            (f.clone(), f.clone(), f.ego_pose_world, f.t)
        }
        World::Neural(w, _) => {
            let f = WorldModel::<f32>::ground_truth(w.as_ref())?.expect("scenario-backed world");
            (f.clone(), f.clone(), f.ego_pose_world, f.t)
        }
    };
    dump_frame(&pred_dir, 0, &start_pred)?;
    dump_frame(&gt_dir, 0, &start_gt)?;

    let mut trace = Trace {
        v: MANIFEST_VERSION,
        world: args.world,
        steps: vec![TraceStep {
            step: 0,
            t: start_t,
            actions: Vec::new(),
            ego_pose: start_pose,
        }],
    };
    let mut plan: Vec<PlanStep> = Vec::new();

    for step in 1..=horizon {
        let (frame, gt, actions) = match &action_log {
            None => {
                let r = match &mut world {
                    World::Oracle(w) => closed_loop_rollout::<f64, _>(w, &[command], None, &cfg.planner)?,
                    World::Neural(w, net) => {
                        closed_loop_rollout(w.as_mut(), &[command], Some(net.as_ref()), &cfg.planner)?
                    }
                };
                let ps = r.steps.into_iter().next().expect("one step");
                let a = vec![ActionCondition::TrajectoryStep {
                    dx: ps.waypoint[0],
                    dy: ps.waypoint[1],
                }];
                plan.push(ps);
                (
                    r.frames.into_iter().next().expect("one frame"),
                    r.ground_truth.into_iter().next(),
                    a,
                )
            }
            Some(log) => {
                let a = log[step - 1].clone();
                let (f, g) = match &mut world {
                    World::Oracle(w) => {
                        let f = WorldModel::<f64>::advance(w, &a)?;
                        (f.clone(), Some(f))
                    }
                    World::Neural(w, _) => {
                        let f = w.advance(&a)?;
                        (f, WorldModel::<f32>::ground_truth(w.as_ref())?)
                    }
                };
                (f, g, a)
            }
        };
        dump_frame(&pred_dir, step, &frame)?;
        if let Some(g) = &gt {
            dump_frame(&gt_dir, step, g)?;
        }
        trace.steps.push(TraceStep {
            step,
            t: frame.t,
            actions,
            ego_pose: frame.ego_pose_world,
        });
    }

    let trace_json = serde_json::to_vec_pretty(&trace).map_err(|e| CliError::Validation(e.to_string()))?;
    write_file(&out.join("trace.json"), &trace_json)?;
    let plan_name = if action_log.is_none() {
        let mut buf = Vec::new();
        for s in &plan {
            serde_json::to_writer(&mut buf, s).map_err(|e| CliError::Validation(e.to_string()))?;
            buf.push(b'\n');
        }
        write_file(&out.join("plan.jsonl"), &buf)?;
        Some("plan.jsonl".to_string())
    } else {
        None
    };
    let weights_name = if let World::Neural(w, net) = &mut world {
        let mut decoder = w.decoder().clone();
        let mut buf = Vec::new();
        write_checkpoint(
            &Weights {
                decoder: &mut decoder,
                planner: net.as_mut(),
            },
            &mut buf,
        )?;
        write_file(&out.join("weights.ckpt"), &buf)?;
        Some("weights.ckpt".to_string())
    } else {
        None
    };

    let manifest = RunManifest {
        v: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: args.seed,
        world: args.world,
        horizon,
        actions: args.actions.to_string(),
        action_log,
        scenario_path: args.scenario_path.as_ref().map(|p| p.display().to_string()),
        scenario: args.scenario.clone(),
        checkpoint: args.checkpoint.as_ref().map(|p| p.display().to_string()),
        config: cfg.clone(),
        outputs: RunOutputs {
            pred_dir: "pred".into(),
            gt_dir: "gt".into(),
            trace: "trace.json".into(),
            plan: plan_name,
            weights: weights_name,
        },
    };
    let text = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Validation(e.to_string()))?;
    write_file(&out.join("manifest.json"), &text)?;
    Ok(manifest)
}

/// Sorted `*.ogrd` files of a directory.
pub fn read_frames(dir: &Path) -> CliResult<Vec<GridDump>> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ogrd"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| read_dump_file(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display()))))
        .collect()
}

/// Occupancy metrics plus VPQ when the predictions carry flow and the ground
/// truth carries instance ids.
pub fn cmd_eval(pred_dir: &Path, gt_dir: &Path, config: &EngineConfig) -> CliResult<MetricReport> {
    let pred = read_frames(pred_dir)?;
    let gt = read_frames(gt_dir)?;
    if pred.len() != gt.len() {
        return Err(CliError::Validation(format!(
            "frame count mismatch: {} predicted vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    let ps: Vec<_> = pred.iter().map(|d| d.semantic.clone()).collect();
    let gs: Vec<_> = gt.iter().map(|d| d.semantic.clone()).collect();
    let mut report = occupancy_report(&ps, &gs, &config.eval)?;
    let flows: Option<Vec<_>> = pred.iter().map(|d| d.flow.clone()).collect();
    let inst: Option<Vec<_>> = gt.iter().map(|d| d.instances.clone()).collect();
    if let (Some(flows), Some(inst)) = (flows, inst) {
        let tracks = predicted_tracks(&gmo_probability(&ps[0]), &ps, &flows, &config.eval)?;
        report.vpq_f = Some(vpq_f(&tracks, &gt_tracks(&inst), config.eval.tp_threshold)?);
    }
    Ok(report)
}

/// Serves the session API until the process is stopped.
pub fn cmd_serve(port: u16, scenario_dir: Option<PathBuf>, config: EngineConfig) -> CliResult<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Io(e.to_string()))?;
    let addr = std::net::SocketAddr::from(([127, 0, 0, 1], port));
    let state = occplan_service::AppState::new(config, scenario_dir);
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Io(format!("cannot bind {addr}: {e}")))?;
        eprintln!("listening on http://{addr}");
        axum_serve(listener, state).await
    })
}

async fn axum_serve(listener: tokio::net::TcpListener, state: std::sync::Arc<occplan_service::AppState>) -> CliResult<()> {
    occplan_service::serve_on(listener, state)
        .await
        .map_err(|e| CliError::Io(e.to_string()))
}
