use crate::action::Command;
use crate::error::{Error, Result};
use crate::neural::{join, Parameterized};
use crate::scalar::{f, s, Scalar};
use crate::tensor::{derive_seed, dims3, softmax, Linear, Tensor};

use super::Trajectory;

/// Ego-query cross-attention refiner.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineParams<T> {
    /// Flattened waypoints `2H -> c`.
    pub traj_embed: Linear<T>,
    /// Trajectory embedding plus command one-hot `c + 3 -> c`.
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub hidden: Linear<T>,
    /// `hidden -> 2H` residual offsets.
    pub output: Linear<T>,
}

impl<T: Scalar> RefineParams<T> {
    /// Seeded weights with a zero output layer, so refinement starts as the identity.
    pub fn seeded(c: usize, hidden: usize, horizon: usize, seed: u64) -> Self {
        let mut p = Self::seeded_full(c, hidden, horizon, seed);
        p.output = Linear::zeros(hidden, 2 * horizon);
        p
    }

    /// Every layer seeded, including the output.
    pub fn seeded_full(c: usize, hidden: usize, horizon: usize, seed: u64) -> Self {
        Self {
            traj_embed: Linear::seeded(2 * horizon, c, derive_seed(seed, "traj_embed")),
            query: Linear::seeded(c + 3, c, derive_seed(seed, "query")),
            key: Linear::seeded(c, c, derive_seed(seed, "key")),
            value: Linear::seeded(c, c, derive_seed(seed, "value")),
            hidden: Linear::seeded(c, hidden, derive_seed(seed, "hidden")),
            output: Linear::seeded(hidden, 2 * horizon, derive_seed(seed, "output")),
        }
    }

    pub fn horizon(&self) -> usize {
        self.traj_embed.inputs() / 2
    }
}

impl<T: Scalar> Parameterized<T> for RefineParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.traj_embed.visit(&join(prefix, "traj_embed"), f);
        self.query.visit(&join(prefix, "query"), f);
        self.key.visit(&join(prefix, "key"), f);
        self.value.visit(&join(prefix, "value"), f);
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.traj_embed.visit_mut(&join(prefix, "traj_embed"), f);
        self.query.visit_mut(&join(prefix, "query"), f);
        self.key.visit_mut(&join(prefix, "key"), f);
        self.value.visit_mut(&join(prefix, "value"), f);
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Learned planner weights: the volume cost head and the refiner.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerNet<T> {
    /// `c -> 1` cost map head.
    pub cost_head: Linear<T>,
    pub refine: RefineParams<T>,
}

impl<T: Scalar> PlannerNet<T> {
    pub fn seeded(c: usize, hidden: usize, horizon: usize, seed: u64) -> Self {
        Self {
            cost_head: Linear::seeded(c, 1, derive_seed(seed, "cost_head")),
            refine: RefineParams::seeded(c, hidden, horizon, derive_seed(seed, "refine")),
        }
    }
}

impl<T: Scalar> Parameterized<T> for PlannerNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.cost_head.visit(&join(prefix, "cost_head"), f);
        self.refine.visit(&join(prefix, "refine"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.cost_head.visit_mut(&join(prefix, "cost_head"), f);
        self.refine.visit_mut(&join(prefix, "refine"), f);
    }
}

/// Adds learned per-step offsets to `traj`, read from cross-attention of the
/// ego query (trajectory embedding plus command) over every BEV cell.
pub fn bev_refine<T: Scalar>(
    traj: &Trajectory,
    command: Command,
    bev: &Tensor<T>,
    params: &RefineParams<T>,
) -> Result<Trajectory> {
    let [h, w, c] = dims3(bev, "refine bev")?;
    if traj.len() != params.horizon() {
        return Err(Error::LengthMismatch(traj.len(), params.horizon()));
    }
    let flat: Vec<T> = traj.waypoints.iter().flatten().map(|&v| s(v)).collect();
    let emb = params
        .traj_embed
        .forward(&Tensor::new(vec![1, flat.len()], flat)?)?;
    let cmd = Tensor::from_f64(vec![1, 3], &command.one_hot())?;
    let q = params.query.forward(&Tensor::concat_last(&[&emb, &cmd])?)?;
    let cells = bev.clone().reshape(vec![h * w, c])?;
    let k = params.key.forward(&cells)?;
    let v = params.value.forward(&cells)?;
    let scale = 1.0 / (c as f64).sqrt();
    let scores: Vec<T> = k
        .rows()
        .map(|row| {
            let dot: f64 = row.iter().zip(q.data()).map(|(&a, &b)| f(a) * f(b)).sum();
            s(dot * scale)
        })
        .collect();
    let attn = softmax(&Tensor::new(vec![1, h * w], scores)?, 1);
    let mut ctx = vec![0f64; c];
    for (&a, row) in attn.data().iter().zip(v.rows()) {
        for (o, &x) in ctx.iter_mut().zip(row) {
            *o += f(a) * f(x);
        }
    }
    let ctx = Tensor::new(vec![1, c], ctx.into_iter().map(|x| s::<T>(x)).collect())?;
    let hid = params.hidden.forward(&ctx)?.map(|x| x.max(T::zero()));
    let offsets = params.output.forward(&hid)?;
    let waypoints = traj
        .waypoints
        .iter()
        .zip(offsets.data().chunks_exact(2))
        .map(|(wp, o)| [wp[0] + f(o[0]), wp[1] + f(o[1])])
        .collect();
    Trajectory::new(waypoints, traj.dt)
}
