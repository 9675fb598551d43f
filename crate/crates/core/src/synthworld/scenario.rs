use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{category, EgoPose};

/// Lookahead (frames) the corridor guarantee covers beyond the scenario horizon.
pub const CORRIDOR_LOOKAHEAD: usize = 4;

const SCHEMA_VERSION: u32 = 1;

/// Axis-aligned rectangle in world meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            min: [x0.min(x1), y0.min(y1)],
            max: [x0.max(x1), y0.max(y1)],
        }
    }

    #[inline]
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.min[0] <= other.max[0]
            && other.min[0] <= self.max[0]
            && self.min[1] <= other.max[1]
            && other.min[1] <= self.max[1]
    }
}

/// A kinematic road user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: u16,
    pub category: u8,
    /// (length, width) in meters.
    pub footprint: (f64, f64),
    pub pose0: EgoPose,
    pub speed: f64,
    pub yaw_rate: f64,
    pub z_extent: (f64, f64),
}

impl AgentSpec {
    /// Pose after `time` seconds of constant speed and yaw rate (exact unicycle integration).
    pub fn pose_at(&self, time: f64) -> EgoPose {
        let p = self.pose0;
        let w = self.yaw_rate;
        let v = self.speed;
        let yaw = p.yaw + w * time;
        let (x, y) = if w.abs() < 1e-12 {
            (
                p.x + v * time * p.yaw.cos(),
                p.y + v * time * p.yaw.sin(),
            )
        } else {
            (
                p.x + v / w * (yaw.sin() - p.yaw.sin()),
                p.y + v / w * (p.yaw.cos() - yaw.cos()),
            )
        };
        EgoPose::new(yaw, x, y)
    }

    pub fn center_z(&self) -> f64 {
        0.5 * (self.z_extent.0 + self.z_extent.1)
    }

    /// World-frame bounding rectangle at `time`, grown by `margin`.
    pub fn aabb_at(&self, time: f64, margin: f64) -> Rect {
        let pose = self.pose_at(time);
        let (hl, hw) = (0.5 * self.footprint.0 + margin, 0.5 * self.footprint.1 + margin);
        let corners = [[hl, hw], [hl, -hw], [-hl, hw], [-hl, -hw]].map(|c| pose.apply(c));
        let xs = corners.map(|c| c[0]);
        let ys = corners.map(|c| c[1]);
        Rect::new(
            xs.iter().cloned().fold(f64::INFINITY, f64::min),
            ys.iter().cloned().fold(f64::INFINITY, f64::min),
            xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        )
    }
}

fn default_version() -> u32 {
    SCHEMA_VERSION
}

/// A complete synthetic driving scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default = "default_version")]
    pub v: u32,
    pub seed: u64,
    pub horizon: usize,
    pub dt: f64,
    pub agents: Vec<AgentSpec>,
    pub drivable: Vec<Rect>,
    pub static_obstacles: Vec<Rect>,
    pub ego0: EgoPose,
    /// (length, width) in meters.
    pub ego_footprint: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Sparse,
    Dense,
    Corridor,
}

impl std::str::FromStr for Difficulty {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sparse" => Ok(Difficulty::Sparse),
            "dense" => Ok(Difficulty::Dense),
            "corridor" => Ok(Difficulty::Corridor),
            other => Err(format!("unknown difficulty {other:?}")),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(m));
        if self.v != SCHEMA_VERSION {
            return bad(format!("unsupported schema version {}", self.v));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt must be > 0".into());
        }
        if self.horizon < 1 {
            return bad("horizon must be >= 1".into());
        }
        if !(self.ego_footprint.0 > 0.0 && self.ego_footprint.1 > 0.0) {
            return bad("ego footprint must be positive".into());
        }
        let ego = [self.ego0.x, self.ego0.y];
        if !self.drivable.iter().any(|r| r.contains(ego)) {
            return bad("ego0 is not inside a drivable rectangle".into());
        }
        let mut ids: Vec<u16> = Vec::new();
        for a in &self.agents {
            if a.id == 0 {
                return bad("agent ids must be positive".into());
            }
            if ids.contains(&a.id) {
                return bad(format!("duplicate agent id {}", a.id));
            }
            ids.push(a.id);
            if !category::is_gmo(a.category) {
                return bad(format!("agent {} has non-GMO category {}", a.id, a.category));
            }
            if !(a.footprint.0 > 0.0 && a.footprint.1 > 0.0) {
                return bad(format!("agent {} footprint must be positive", a.id));
            }
            if !(a.z_extent.1 > a.z_extent.0) {
                return bad(format!("agent {} z extent is empty", a.id));
            }
            if !(a.speed.is_finite() && a.yaw_rate.is_finite()) {
                return bad(format!("agent {} kinematics not finite", a.id));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let scn: Scenario = serde_json::from_str(s)?;
        scn.validate()?;
        Ok(scn)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Agent poses at frame `t` (unicycle model).
    pub fn step_agents(&self, t: usize) -> Vec<EgoPose> {
        let time = t as f64 * self.dt;
        self.agents.iter().map(|a| a.pose_at(time)).collect()
    }
}

/// Agent poses at frame `t`.
pub fn step_agents(scn: &Scenario, t: usize) -> Vec<EgoPose> {
    scn.step_agents(t)
}

const VEHICLE_SIZE: (f64, f64) = (4.5, 1.9);
const PEDESTRIAN_SIZE: (f64, f64) = (0.7, 0.7);

fn random_agent(rng: &mut ChaCha8Rng, id: u16, x: (f64, f64), y: (f64, f64)) -> AgentSpec {
    let vehicle = rng.gen_bool(0.7);
    let pose0 = EgoPose::new(
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        rng.gen_range(x.0..x.1),
        rng.gen_range(y.0..y.1),
    );
    if vehicle {
        AgentSpec {
            id,
            category: category::VEHICLE,
            footprint: VEHICLE_SIZE,
            pose0,
            speed: rng.gen_range(0.0..6.0),
            yaw_rate: rng.gen_range(-0.2..0.2),
            z_extent: (0.0, 1.6),
        }
    } else {
        AgentSpec {
            id,
            category: category::PEDESTRIAN,
            footprint: PEDESTRIAN_SIZE,
            pose0,
            speed: rng.gen_range(0.0..1.5),
            yaw_rate: rng.gen_range(-0.3..0.3),
            z_extent: (0.0, 1.8),
        }
    }
}

/// Band the corridor difficulty keeps free of agents: ahead of the ego along +x.
pub fn corridor_band(scn: &Scenario, lateral_clearance: f64) -> Rect {
    let (len, width) = scn.ego_footprint;
    Rect::new(
        -0.5 * len,
        -(0.5 * width + lateral_clearance),
        len * scn.horizon as f64 + 0.5 * len,
        0.5 * width + lateral_clearance,
    )
}

/// Deterministic scenario generator.
///
/// All scenes share a straight road along +x with the ego at the origin;
/// sparse and dense add a cross street. `Corridor` rejects any agent whose
/// box comes near the lane ahead of the ego during the horizon plus
/// [`CORRIDOR_LOOKAHEAD`] frames.
pub fn generate_random_scenario(seed: u64, difficulty: Difficulty) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5ce7e);
    let horizon = 8;
    let dt = 0.5;
    let ego_footprint = (4.0, 1.8);
    let mut drivable = vec![Rect::new(-40.0, -7.0, 80.0, 7.0)];
    if difficulty != Difficulty::Corridor {
        let cx = rng.gen_range(5.0..25.0);
        drivable.push(Rect::new(cx, -40.0, cx + 12.0, 40.0));
    }
    let n_static = rng.gen_range(2..=4);
    let static_obstacles = (0..n_static)
        .map(|_| {
            let x = rng.gen_range(-20.0..50.0);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let y = side * rng.gen_range(9.0..13.0);
            Rect::new(x, y, x + rng.gen_range(1.0..4.0), y + side * rng.gen_range(1.0..3.0))
        })
        .collect();

    let mut scn = Scenario {
        v: SCHEMA_VERSION,
        seed,
        horizon,
        dt,
        agents: Vec::new(),
        drivable,
        static_obstacles,
        ego0: EgoPose::identity(),
        ego_footprint,
    };

    let count = match difficulty {
        Difficulty::Sparse => rng.gen_range(1..=3),
        Difficulty::Dense => rng.gen_range(8..=15),
        Difficulty::Corridor => rng.gen_range(2..=6),
    };
    let ego_box = Rect::new(-3.5, -2.4, 3.5, 2.4);
    let band = corridor_band(&scn, 2.5);
    let frames = horizon + CORRIDOR_LOOKAHEAD;
    let mut attempts = 0;
    while scn.agents.len() < count && attempts < 10_000 {
        attempts += 1;
        let id = scn.agents.len() as u16 + 1;
        let agent = match difficulty {
            Difficulty::Corridor => {
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let mut a = random_agent(&mut rng, id, (-10.0, 45.0), (4.5, 11.0));
                a.pose0.y *= side;
                a
            }
            _ => random_agent(&mut rng, id, (-10.0, 40.0), (-10.0, 10.0)),
        };
        if agent.aabb_at(0.0, 0.0).intersects(&ego_box) {
            continue;
        }
        if difficulty == Difficulty::Corridor
            && (0..=frames).any(|t| agent.aabb_at(t as f64 * dt, 0.5).intersects(&band))
        {
            continue;
        }
        scn.agents.push(agent);
    }
    scn
}
