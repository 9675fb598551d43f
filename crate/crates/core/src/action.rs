//! Ego action conditions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::EgoPose;

/// High-level driving intention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Forward,
    Left,
    Right,
}

impl Command {
    pub const ALL: [Command; 3] = [Command::Forward, Command::Left, Command::Right];

    pub fn index(self) -> usize {
        match self {
            Command::Forward => 0,
            Command::Left => 1,
            Command::Right => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Command::Forward => "forward",
            Command::Left => "left",
            Command::Right => "right",
        }
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        v
    }
}

impl std::str::FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "forward" => Ok(Command::Forward),
            "left" => Ok(Command::Left),
            "right" => Ok(Command::Right),
            other => Err(format!("unknown command {other:?}")),
        }
    }
}

/// One ego action, tagged by kind on the wire:
/// `{"kind":"velocity","vx":2,"vy":0}`, `{"kind":"command","value":"left"}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActionCondition {
    Velocity { vx: f64, vy: f64 },
    Curvature { k: f64 },
    TrajectoryStep { dx: f64, dy: f64 },
    Command { value: Command },
}

impl ActionCondition {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ActionCondition::Velocity { .. } => "velocity",
            ActionCondition::Curvature { .. } => "curvature",
            ActionCondition::TrajectoryStep { .. } => "trajectory_step",
            ActionCondition::Command { .. } => "command",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = match *self {
            ActionCondition::Velocity { vx, vy } => vx.is_finite() && vy.is_finite(),
            ActionCondition::Curvature { k } => k.is_finite(),
            ActionCondition::TrajectoryStep { dx, dy } => dx.is_finite() && dy.is_finite(),
            ActionCondition::Command { .. } => true,
        };
        if finite {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{} action", self.kind_name())))
        }
    }

    /// Ego motion over one frame implied by this action, if it has one.
    pub fn ego_motion(&self, dt: f64) -> Result<EgoPose> {
        match *self {
            ActionCondition::TrajectoryStep { dx, dy } => Ok(step_motion(dx, dy)),
            ActionCondition::Velocity { vx, vy } => Ok(EgoPose::translation(vx * dt, vy * dt)),
            ActionCondition::Curvature { .. } | ActionCondition::Command { .. } => {
                Err(Error::NonConvertibleAction {
                    kind: self.kind_name(),
                })
            }
        }
    }
}

/// Pose reached by a circular arc from the origin (heading +x) whose chord is
/// `(dx, dy)`: the end tangent turns by twice the chord angle.
pub fn step_motion(dx: f64, dy: f64) -> EgoPose {
    if dx == 0.0 && dy == 0.0 {
        return EgoPose::identity();
    }
    EgoPose::new(2.0 * dy.atan2(dx), dx, dy)
}

/// Ego motion implied by the first convertible action in `actions`, identity otherwise.
/// Trajectory steps take precedence over velocities.
pub fn implied_motion(actions: &[ActionCondition], dt: f64) -> EgoPose {
    actions
        .iter()
        .find(|a| matches!(a, ActionCondition::TrajectoryStep { .. }))
        .or_else(|| {
            actions
                .iter()
                .find(|a| matches!(a, ActionCondition::Velocity { .. }))
        })
        .and_then(|a| a.ego_motion(dt).ok())
        .unwrap_or_else(EgoPose::identity)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_format() {
        let a: ActionCondition = serde_json::from_str(r#"{"kind":"command","value":"left"}"#).unwrap();
        assert_eq!(
            a,
            ActionCondition::Command {
                value: Command::Left
            }
        );
        let v = serde_json::to_value(ActionCondition::Velocity { vx: 2.0, vy: 0.0 }).unwrap();
        assert_eq!(v["kind"], "velocity");
        assert!(serde_json::from_str::<ActionCondition>(r#"{"kind":"jump"}"#).is_err());
    }

    #[test]
    fn motion_conversions() {
        let m = ActionCondition::TrajectoryStep { dx: 1.0, dy: 0.0 }.ego_motion(0.5).unwrap();
        assert!(m.approx_eq(&EgoPose::translation(1.0, 0.0), 1e-12));
        let m = ActionCondition::Velocity { vx: 2.0, vy: 0.0 }.ego_motion(0.5).unwrap();
        assert!(m.approx_eq(&EgoPose::translation(1.0, 0.0), 1e-12));
        assert!(ActionCondition::Command {
            value: Command::Forward
        }
        .ego_motion(0.5)
        .is_err());
        assert!(ActionCondition::Curvature { k: 0.1 }.ego_motion(0.5).is_err());
    }

    #[test]
    fn arc_chord_heading() {
        // quarter circle of radius 1: chord (1, 1), end heading +y
        let m = step_motion(1.0, 1.0);
        assert!((m.yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }
}
