use serde::{Deserialize, Serialize};

use crate::action::ActionCondition;
use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tensor::{Linear, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierSpec {
    pub num_frequencies: usize,
    pub base: f64,
    pub include_input: bool,
}

impl Default for FourierSpec {
    fn default() -> Self {
        Self {
            num_frequencies: 4,
            base: 2.0,
            include_input: true,
        }
    }
}

impl FourierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_frequencies < 1 || !(self.base.is_finite() && self.base > 0.0) {
            return Err(Error::InvalidConfig(format!("bad Fourier spec {self:?}")));
        }
        Ok(())
    }

    /// Features emitted per encoded scalar.
    pub fn per_scalar(&self) -> usize {
        2 * self.num_frequencies + self.include_input as usize
    }

    fn encode(&self, v: f64, out: &mut Vec<f64>) {
        let mut freq = 1.0;
        for _ in 0..self.num_frequencies {
            let arg = freq * std::f64::consts::PI * v;
            out.push(arg.sin());
            out.push(arg.cos());
            freq *= self.base;
        }
        if self.include_input {
            out.push(v);
        }
    }
}

/// Embedding of one action. Commands bypass the Fourier features as a one-hot of 3.
pub fn fourier_embed<T: Scalar>(a: &ActionCondition, spec: &FourierSpec) -> Tensor<T> {
    let mut out = Vec::new();
    match *a {
        ActionCondition::Velocity { vx, vy } => {
            spec.encode(vx, &mut out);
            spec.encode(vy, &mut out);
        }
        ActionCondition::Curvature { k } => spec.encode(k, &mut out),
        ActionCondition::TrajectoryStep { dx, dy } => {
            spec.encode(dx, &mut out);
            spec.encode(dy, &mut out);
        }
        ActionCondition::Command { value } => out.extend(value.one_hot()),
    }
    let n = out.len();
    Tensor::raw(vec![n], out.into_iter().map(|v| s::<T>(v)).collect())
}

/// `(offset, width)` of the velocity, curvature, trajectory and command slots.
pub fn slot_layout(spec: &FourierSpec) -> [(usize, usize); 4] {
    let p = spec.per_scalar();
    let widths = [2 * p, p, 2 * p, 3];
    let mut at = 0;
    widths.map(|w| {
        let slot = (at, w);
        at += w;
        slot
    })
}

/// Total width of the concatenated slot vector.
pub fn slot_width(spec: &FourierSpec) -> usize {
    let [.., (at, w)] = slot_layout(spec);
    at + w
}

fn slot_index(a: &ActionCondition) -> usize {
    match a {
        ActionCondition::Velocity { .. } => 0,
        ActionCondition::Curvature { .. } => 1,
        ActionCondition::TrajectoryStep { .. } => 2,
        ActionCondition::Command { .. } => 3,
    }
}

/// Concatenated slot vector `[1, total]`; absent kinds stay zero and a later
/// action of the same kind replaces an earlier one.
pub fn unified_slots<T: Scalar>(actions: &[ActionCondition], spec: &FourierSpec) -> Result<Tensor<T>> {
    let layout = slot_layout(spec);
    let total = slot_width(spec);
    let mut data = vec![T::zero(); total];
    for a in actions {
        a.validate()?;
        let (at, width) = layout[slot_index(a)];
        let e = fourier_embed::<T>(a, spec);
        data[at..at + width].copy_from_slice(e.data());
    }
    Ok(Tensor::raw(vec![1, total], data))
}

/// Fused action embedding `[1, c]`.
pub fn unify_conditions<T: Scalar>(
    actions: &[ActionCondition],
    spec: &FourierSpec,
    proj: &Linear<T>,
) -> Result<Tensor<T>> {
    proj.forward(&unified_slots(actions, spec)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::Command;

    fn spec(nf: usize, include_input: bool) -> FourierSpec {
        FourierSpec {
            num_frequencies: nf,
            base: 2.0,
            include_input,
        }
    }

    #[test]
    fn zero_scalar() {
        let e: Tensor<f64> = fourier_embed(&ActionCondition::Curvature { k: 0.0 }, &spec(3, false));
        for pair in e.data().chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn command_one_hot() {
        let e: Tensor<f64> = fourier_embed(
            &ActionCondition::Command {
                value: Command::Left,
            },
            &spec(4, true),
        );
        assert_eq!(e.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn unit_scalar_trig() {
        let e: Tensor<f64> = fourier_embed(&ActionCondition::Curvature { k: 1.0 }, &spec(2, false));
        let want = [0.0, -1.0, 0.0, 1.0];
        for (a, b) in e.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fixed_lengths_per_kind() {
        let sp = spec(4, true);
        let p = sp.per_scalar();
        assert_eq!(p, 9);
        let lens = [
            ActionCondition::Velocity { vx: 1.0, vy: 2.0 },
            ActionCondition::Curvature { k: 0.1 },
            ActionCondition::TrajectoryStep { dx: 1.0, dy: 0.0 },
        ]
        .map(|a| fourier_embed::<f32>(&a, &sp).len());
        assert_eq!(lens, [2 * p, p, 2 * p]);
        let layout = slot_layout(&sp);
        assert_eq!(layout, [(0, 18), (18, 9), (27, 18), (45, 3)]);
    }

    #[test]
    fn slot_canonicalization() {
        let sp = FourierSpec::default();
        let proj = Linear::<f64>::seeded(48, 8, 3);
        let traj = ActionCondition::TrajectoryStep { dx: 1.2, dy: -0.3 };
        let a = unify_conditions(&[traj], &sp, &proj).unwrap();
        // absent velocity/curvature/command slots are zero: identical output
        let slots = unified_slots::<f64>(&[traj], &sp).unwrap();
        let b = proj.forward(&slots).unwrap();
        assert_eq!(a, b);
        let zero_proj = Linear::<f64>::zeros(48, 8);
        assert!(unify_conditions(&[], &sp, &zero_proj)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let v1 = unify_conditions(&[ActionCondition::Velocity { vx: 1.0, vy: 0.0 }], &sp, &proj).unwrap();
        let v2 = unify_conditions(&[ActionCondition::Velocity { vx: 3.0, vy: 0.0 }], &sp, &proj).unwrap();
        assert!(v1.max_abs_diff(&v2).unwrap() > 0.0);
        // last action of a kind wins
        let both = unified_slots::<f64>(
            &[
                ActionCondition::Velocity { vx: 1.0, vy: 0.0 },
                ActionCondition::Velocity { vx: 3.0, vy: 0.0 },
            ],
            &sp,
        )
        .unwrap();
        let last = unified_slots::<f64>(&[ActionCondition::Velocity { vx: 3.0, vy: 0.0 }], &sp).unwrap();
        assert_eq!(both, last);
    }

    #[test]
    fn lipschitz_bound() {
        let sp = spec(4, false);
        let lip = std::f64::consts::PI * (0..4).map(|j| 2f64.powi(j)).sum::<f64>();
        for i in 0..200 {
            let a = -3.0 + 0.03 * i as f64;
            let b = a + 1e-3 * ((i % 7) as f64 + 1.0);
            let ea: Tensor<f64> = fourier_embed(&ActionCondition::Curvature { k: a }, &sp);
            let eb: Tensor<f64> = fourier_embed(&ActionCondition::Curvature { k: b }, &sp);
            let gap = ea.max_abs_diff(&eb).unwrap();
            assert!(gap <= lip * (b - a) + 1e-12);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let r = unified_slots::<f64>(&[ActionCondition::Curvature { k: f64::NAN }], &FourierSpec::default());
        assert!(r.is_err());
    }
}
