use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::EgoPose;
use crate::scalar::{s, Scalar};
use crate::tensor::{
    derive_seed, dims3, layer_norm_backward, layer_norm_noaffine, Linear, Tensor,
};

use super::{join, Parameterized};

/// Which generator produced a set of affine parameters. Also the fixed order
/// in which stages are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondSource {
    Semantic,
    EgoMotion,
    AgentMotion,
}

/// Per-cell affine modulation `gamma * LN(F) + beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub source: CondSource,
}

impl<T: Scalar> CondNormParams<T> {
    /// gamma = 1, beta = 0.
    pub fn identity(h: usize, w: usize, c: usize, source: CondSource) -> Self {
        Self {
            gamma: Tensor::ones(vec![h, w, c]),
            beta: Tensor::zeros(vec![h, w, c]),
            source,
        }
    }

    /// Splits a `[h, w, 2c]` tensor into gamma (first half) and beta.
    fn from_packed(packed: &Tensor<T>, source: CondSource) -> Result<Self> {
        let [h, w, cc] = dims3(packed, "packed cond params")?;
        let c = cc / 2;
        let mut gamma = Vec::with_capacity(h * w * c);
        let mut beta = Vec::with_capacity(h * w * c);
        for row in packed.rows() {
            gamma.extend_from_slice(&row[..c]);
            beta.extend_from_slice(&row[c..]);
        }
        Ok(Self {
            gamma: Tensor::new(vec![h, w, c], gamma)?,
            beta: Tensor::new(vec![h, w, c], beta)?,
            source,
        })
    }
}

fn identity_bias<T: Scalar>(c: usize) -> Tensor<T> {
    Tensor::from_fn(vec![2 * c], |i| if i < c { T::one() } else { T::zero() })
}

/// Semantic generator: a lightweight voxel classifier followed by a 1x1
/// projection of the concatenated one-hot height slabs.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticCondGen<T> {
    /// `c -> d * categories`
    pub head: Linear<T>,
    /// `d * categories -> 2c`
    pub proj: Linear<T>,
    pub depth: usize,
    pub categories: usize,
}

impl<T: Scalar> SemanticCondGen<T> {
    pub fn seeded(c: usize, depth: usize, categories: usize, seed: u64) -> Self {
        let mut proj = Linear::seeded(depth * categories, 2 * c, derive_seed(seed, "proj"));
        proj.bias = identity_bias(c);
        Self {
            head: Linear::seeded(c, depth * categories, derive_seed(seed, "head")),
            proj,
            depth,
            categories,
        }
    }

    /// Zero projection weights with bias (1, 0): produces the identity modulation.
    pub fn identity(c: usize, depth: usize, categories: usize, seed: u64) -> Self {
        Self {
            head: Linear::seeded(c, depth * categories, derive_seed(seed, "head")),
            proj: Linear {
                weight: Tensor::zeros(vec![depth * categories, 2 * c]),
                bias: identity_bias(c),
            },
            depth,
            categories,
        }
    }

    /// Voxel logits `[h, w, d, categories]`.
    pub fn logits(&self, bev: &Tensor<T>) -> Result<Tensor<T>> {
        let [h, w, _] = dims3(bev, "semantic head input")?;
        self.head
            .forward(bev)?
            .reshape(vec![h, w, self.depth, self.categories])
    }
}

impl<T: Scalar> Parameterized<T> for SemanticCondGen<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.head.visit(&join(prefix, "head"), f);
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.head.visit_mut(&join(prefix, "head"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// One-hot of the argmax over the trailing axis (ties go to the lowest index).
pub(crate) fn argmax_one_hot<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.last_dim();
    let mut out = vec![T::zero(); logits.len()];
    for (r, row) in logits.rows().enumerate() {
        out[r * k + argmax(row)] = T::one();
    }
    Tensor::raw(logits.shape().to_vec(), out)
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Semantic parameters (gamma^s, beta^s). Depends on the logits only through
/// their argmax.
pub fn semantic_cond_params<T: Scalar>(
    bev: &Tensor<T>,
    gen: &SemanticCondGen<T>,
) -> Result<CondNormParams<T>> {
    let logits = gen.logits(bev)?;
    semantic_cond_params_from_logits(&logits, gen)
}

pub(crate) fn semantic_cond_params_from_logits<T: Scalar>(
    logits: &Tensor<T>,
    gen: &SemanticCondGen<T>,
) -> Result<CondNormParams<T>> {
    let (h, w) = (logits.shape()[0], logits.shape()[1]);
    let slabs = argmax_one_hot(logits).reshape(vec![h, w, gen.depth * gen.categories])?;
    CondNormParams::from_packed(&gen.proj.forward(&slabs)?, CondSource::Semantic)
}

/// Ego-motion generator: MLP over the flattened planar `[R | T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoCondGen<T> {
    /// `6 -> hidden`
    pub hidden: Linear<T>,
    /// `hidden -> 2c`
    pub output: Linear<T>,
}

impl<T: Scalar> EgoCondGen<T> {
    pub fn seeded(c: usize, seed: u64) -> Self {
        let mut output = Linear::seeded(c, 2 * c, derive_seed(seed, "output"));
        output.bias = identity_bias(c);
        Self {
            hidden: Linear::seeded(6, c, derive_seed(seed, "hidden")),
            output,
        }
    }

    pub fn identity(c: usize, seed: u64) -> Self {
        Self {
            hidden: Linear::seeded(6, c, derive_seed(seed, "hidden")),
            output: Linear {
                weight: Tensor::zeros(vec![c, 2 * c]),
                bias: identity_bias(c),
            },
        }
    }
}

impl<T: Scalar> Parameterized<T> for EgoCondGen<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Spatially uniform (gamma^e, beta^e) broadcast over an `h x w` grid.
pub fn ego_motion_cond_params<T: Scalar>(
    e: &EgoPose,
    gen: &EgoCondGen<T>,
    h: usize,
    w: usize,
) -> Result<CondNormParams<T>> {
    let m = e.matrix_2x3();
    let x = Tensor::new(vec![1, 6], m.iter().map(|&v| s::<T>(v)).collect())?;
    let hid = gen.hidden.forward(&x)?.map(|v| v.max(T::zero()));
    let packed = gen.output.forward(&hid)?;
    let row = packed.data().to_vec();
    let tiled: Vec<T> = (0..h * w).flat_map(|_| row.iter().copied()).collect();
    CondNormParams::from_packed(
        &Tensor::raw(vec![h, w, row.len()], tiled),
        CondSource::EgoMotion,
    )
}

/// Agent-motion generator: 1x1 projection of per-column flow `(d * 3) -> 2c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentCondGen<T> {
    pub encoder: Linear<T>,
}

impl<T: Scalar> AgentCondGen<T> {
    pub fn seeded(c: usize, depth: usize, seed: u64) -> Self {
        let mut encoder = Linear::seeded(3 * depth, 2 * c, derive_seed(seed, "encoder"));
        encoder.bias = identity_bias(c);
        Self { encoder }
    }

    pub fn identity(c: usize, depth: usize) -> Self {
        Self {
            encoder: Linear {
                weight: Tensor::zeros(vec![3 * depth, 2 * c]),
                bias: identity_bias(c),
            },
        }
    }
}

impl<T: Scalar> Parameterized<T> for AgentCondGen<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
    }
}

/// (gamma^f, beta^f) from a flow field `[h, w, d, 3]`.
pub fn agent_motion_cond_params<T: Scalar>(
    flow: &Tensor<T>,
    gen: &AgentCondGen<T>,
) -> Result<CondNormParams<T>> {
    let (h, w, d) = match flow.shape() {
        &[h, w, d, 3] => (h, w, d),
        other => {
            return Err(Error::ShapeMismatch {
                left: other.to_vec(),
                right: vec![0, 0, gen.encoder.inputs() / 3, 3],
                context: "agent motion flow",
            })
        }
    };
    if 3 * d != gen.encoder.inputs() {
        return Err(Error::ShapeMismatch {
            left: flow.shape().to_vec(),
            right: vec![h, w, gen.encoder.inputs() / 3, 3],
            context: "agent motion flow depth",
        });
    }
    let cols = flow.clone().reshape(vec![h, w, 3 * d])?;
    CondNormParams::from_packed(&gen.encoder.forward(&cols)?, CondSource::AgentMotion)
}

fn stage_order<T>(params: &[CondNormParams<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..params.len()).collect();
    order.sort_by_key(|&i| params[i].source);
    order
}

fn check_params<T: Scalar>(bev: &Tensor<T>, p: &CondNormParams<T>) -> Result<()> {
    bev.check_shape(&p.gamma, "cond norm gamma")?;
    bev.check_shape(&p.beta, "cond norm beta")
}

/// Layer-normalizes once, then applies `gamma * x + beta` stage by stage in
/// source order (semantic, ego motion, agent motion). No params gives the
/// plain layer norm.
pub fn conditional_normalize<T: Scalar>(
    bev: &Tensor<T>,
    params: &[CondNormParams<T>],
) -> Result<Tensor<T>> {
    for p in params {
        check_params(bev, p)?;
    }
    let mut x = layer_norm_noaffine(bev);
    for i in stage_order(params) {
        let p = &params[i];
        for ((v, &g), &b) in x.data_mut().iter_mut().zip(p.gamma.data()).zip(p.beta.data()) {
            *v = g * *v + b;
        }
    }
    Ok(x)
}

/// Gradients of [`conditional_normalize`]; `gammas`/`betas` follow the order of `params`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondNormGrads<T> {
    pub input: Tensor<T>,
    pub gammas: Vec<Tensor<T>>,
    pub betas: Vec<Tensor<T>>,
}

pub fn conditional_normalize_backward<T: Scalar>(
    bev: &Tensor<T>,
    params: &[CondNormParams<T>],
    dout: &Tensor<T>,
) -> Result<CondNormGrads<T>> {
    bev.check_shape(dout, "cond norm dout")?;
    for p in params {
        check_params(bev, p)?;
    }
    let order = stage_order(params);
    let mut stage_inputs = Vec::with_capacity(order.len());
    let mut x = layer_norm_noaffine(bev);
    for &i in &order {
        let next = x.mul(&params[i].gamma)?.add(&params[i].beta)?;
        stage_inputs.push(x);
        x = next;
    }
    let mut gammas = vec![Tensor::zeros(bev.shape().to_vec()); params.len()];
    let mut betas = vec![Tensor::zeros(bev.shape().to_vec()); params.len()];
    let mut g = dout.clone();
    for (stage, &i) in order.iter().enumerate().rev() {
        gammas[i] = g.mul(&stage_inputs[stage])?;
        betas[i] = g.clone();
        g = g.mul(&params[i].gamma)?;
    }
    let g = layer_norm_backward(bev, &g)?;
    Ok(CondNormGrads {
        input: g,
        gammas,
        betas,
    })
}
