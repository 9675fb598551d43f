//! Memory queue and the autoregressive world decoder.

mod loss;

pub use loss::{
    bce_occupancy, cross_entropy, forecast_loss, l1_masked, norm_loss, LossOutput, Prediction,
};

use serde::{Deserialize, Serialize};

use crate::action::{implied_motion, ActionCondition};
use crate::error::{Error, Result};
use crate::grid::{category, EgoPose, FlowGrid, GridConfig, SemanticGrid};
use crate::neural::{
    agent_motion_cond_params, channel_to_height_heads, conditional_normalize,
    ego_motion_cond_params, flow_to_grid, join, logits_to_semantic, semantic_cond_params,
    unify_conditions, AgentCondGen, DeformAttnParams, EgoCondGen, FeedForward, FourierSpec,
    HeadParams, Parameterized, SemanticCondGen, slot_width,
};
use crate::scalar::Scalar;
use crate::synthworld::GridFrame;
use crate::tensor::{derive_seed, layer_norm_noaffine, Linear, SeededInit, Tensor};

/// A BEV feature map `[h, w, c]` with its acquisition frame and pose.
#[derive(Debug, Clone, PartialEq)]
pub struct BevEmbedding<T> {
    pub t: i64,
    pub features: Tensor<T>,
    pub ego_pose_world: EgoPose,
}

/// Fixed-capacity FIFO of normalized embeddings, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryQueue<T> {
    capacity: usize,
    entries: Vec<BevEmbedding<T>>,
}

impl<T: Scalar> MemoryQueue<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("memory capacity must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            entries: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[BevEmbedding<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last(&self) -> Option<&BevEmbedding<T>> {
        self.entries.last()
    }

    /// Appends an already-normalized entry, evicting the oldest when full.
    pub fn push_raw(&self, e: BevEmbedding<T>) -> Result<Self> {
        if let Some(last) = self.entries.last() {
            if e.t <= last.t {
                return Err(Error::NonMonotonicMemory {
                    last: last.t,
                    got: e.t,
                });
            }
        }
        let mut next = self.clone();
        if next.entries.len() == next.capacity {
            next.entries.remove(0);
        }
        next.entries.push(e);
        Ok(next)
    }

    /// Mutable access for perturbation experiments.
    pub fn entries_mut(&mut self) -> &mut [BevEmbedding<T>] {
        &mut self.entries
    }
}

/// Conditional-normalization generators used when pushing into memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryParams<T> {
    pub semantic: SemanticCondGen<T>,
    pub ego: EgoCondGen<T>,
    pub agent: AgentCondGen<T>,
}

impl<T: Scalar> MemoryParams<T> {
    pub fn seeded(c: usize, depth: usize, categories: usize, seed: u64) -> Self {
        Self {
            semantic: SemanticCondGen::seeded(c, depth, categories, derive_seed(seed, "semantic")),
            ego: EgoCondGen::seeded(c, derive_seed(seed, "ego")),
            agent: AgentCondGen::seeded(c, depth, derive_seed(seed, "agent")),
        }
    }

    /// Generators whose parameters are always gamma = 1, beta = 0.
    pub fn identity(c: usize, depth: usize, categories: usize, seed: u64) -> Self {
        Self {
            semantic: SemanticCondGen::identity(c, depth, categories, derive_seed(seed, "semantic")),
            ego: EgoCondGen::identity(c, derive_seed(seed, "ego")),
            agent: AgentCondGen::identity(c, depth),
        }
    }
}

impl<T: Scalar> Parameterized<T> for MemoryParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.semantic.visit(&join(prefix, "semantic"), f);
        self.ego.visit(&join(prefix, "ego"), f);
        self.agent.visit(&join(prefix, "agent"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.semantic.visit_mut(&join(prefix, "semantic"), f);
        self.ego.visit_mut(&join(prefix, "ego"), f);
        self.agent.visit_mut(&join(prefix, "agent"), f);
    }
}

/// Side information for [`memory_push`].
#[derive(Debug, Clone, PartialEq)]
pub struct PushContext<T> {
    /// Ego transform fed to the ego-motion generator.
    pub ego_transform: EgoPose,
    /// Backward flow `[h, w, d, 3]` fed to the agent-motion generator.
    pub flow: Tensor<T>,
}

/// Normalizes `e` with semantic, ego-motion and agent-motion parameters and
/// appends it to a copy of `q`.
pub fn memory_push<T: Scalar>(
    q: &MemoryQueue<T>,
    e: BevEmbedding<T>,
    ctx: &PushContext<T>,
    gens: &MemoryParams<T>,
) -> Result<MemoryQueue<T>> {
    if let Some(last) = q.last() {
        if e.t <= last.t {
            return Err(Error::NonMonotonicMemory {
                last: last.t,
                got: e.t,
            });
        }
    }
    let (h, w) = (e.features.shape()[0], e.features.shape()[1]);
    let params = [
        semantic_cond_params(&e.features, &gens.semantic)?,
        ego_motion_cond_params(&ctx.ego_transform, &gens.ego, h, w)?,
        agent_motion_cond_params(&ctx.flow, &gens.agent)?,
    ];
    let features = conditional_normalize(&e.features, &params)?;
    q.push_raw(BevEmbedding { features, ..e })
}

/// Fractional `(row, col)` of every BEV cell (row-major) after mapping the
/// cell center through `inverse(pose)`. `pose` maps memory-entry coordinates
/// into the current frame.
pub fn temporal_reference_points(cfg: &GridConfig, pose: &EgoPose) -> Vec<[f64; 2]> {
    let inv = pose.inverse();
    let (h, w, _) = cfg.dims();
    let r = cfg.resolution();
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let c = cfg.cell_center(i as i64, j as i64);
            let p = inv.apply(c);
            // offsets from the cell center keep the identity pose exact
            out.push([i as f64 + (p[0] - c[0]) / r, j as f64 + (p[1] - c[1]) / r]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldDecoderConfig {
    pub num_layers: usize,
    pub horizon: usize,
    pub dt: f64,
    pub channels: usize,
    pub num_heads: usize,
    pub num_points: usize,
    pub ffn_hidden: usize,
    pub memory_capacity: usize,
    pub categories: usize,
    pub fourier: FourierSpec,
    pub lambda_flow: f64,
    pub seed: u64,
}

impl Default for WorldDecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            horizon: 4,
            dt: 0.5,
            channels: 32,
            num_heads: 2,
            num_points: 4,
            ffn_hidden: 64,
            memory_capacity: 3,
            categories: category::COUNT,
            fourier: FourierSpec::default(),
            lambda_flow: 1.0,
            seed: 0,
        }
    }
}

impl WorldDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_layers < 1 {
            return bad("num_layers must be >= 1");
        }
        if self.horizon < 1 {
            return bad("horizon must be >= 1");
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt must be > 0");
        }
        if self.channels < 2 || self.ffn_hidden < 1 {
            return bad("channels must be >= 2");
        }
        if self.memory_capacity < 1 {
            return bad("memory_capacity must be >= 1");
        }
        if self.categories != category::COUNT {
            return bad("categories must match the fixed label table (5)");
        }
        self.fourier.validate()
    }
}

/// Cross-attention against the single fused action token. With one key the
/// attention weight is 1, so the result is `output(value(token))` for every query.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionAttn<T> {
    pub value: Linear<T>,
    pub output: Linear<T>,
}

impl<T: Scalar> Parameterized<T> for ActionAttn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.value.visit(&join(prefix, "value"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.value.visit_mut(&join(prefix, "value"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_attn: DeformAttnParams<T>,
    pub temporal_attn: DeformAttnParams<T>,
    pub action_attn: ActionAttn<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Scalar> Parameterized<T> for DecoderLayer<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.temporal_attn.visit(&join(prefix, "temporal_attn"), f);
        self.action_attn.visit(&join(prefix, "action_attn"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.self_attn.visit_mut(&join(prefix, "self_attn"), f);
        self.temporal_attn.visit_mut(&join(prefix, "temporal_attn"), f);
        self.action_attn.visit_mut(&join(prefix, "action_attn"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

/// All learned state of the world model.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldDecoder<T> {
    pub config: WorldDecoderConfig,
    pub grid: GridConfig,
    /// Learned BEV queries `[h * w, c]`, reused every step.
    pub queries: Tensor<T>,
    /// Observation encoder `d * categories -> c`.
    pub embed: Linear<T>,
    pub memory: MemoryParams<T>,
    pub layers: Vec<DecoderLayer<T>>,
    /// Action slot vector -> c.
    pub action_proj: Linear<T>,
    pub heads: HeadParams<T>,
}

impl<T: Scalar> WorldDecoder<T> {
    pub fn seeded(config: WorldDecoderConfig, grid: GridConfig) -> Result<Self> {
        config.validate()?;
        let (h, w, d) = grid.dims();
        let c = config.channels;
        let k = config.categories;
        let seed = config.seed;
        let layers = (0..config.num_layers)
            .map(|l| {
                let ls = derive_seed(seed, &format!("layer{l}"));
                Ok(DecoderLayer {
                    self_attn: DeformAttnParams::seeded(
                        c,
                        config.num_heads,
                        config.num_points,
                        derive_seed(ls, "self_attn"),
                    )?,
                    temporal_attn: DeformAttnParams::seeded(
                        c,
                        config.num_heads,
                        config.num_points,
                        derive_seed(ls, "temporal_attn"),
                    )?,
                    action_attn: ActionAttn {
                        value: Linear::seeded(c, c, derive_seed(ls, "action_value")),
                        output: Linear::seeded(c, c, derive_seed(ls, "action_output")),
                    },
                    ffn: FeedForward::seeded(c, config.ffn_hidden, derive_seed(ls, "ffn")),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            grid,
            queries: SeededInit::uniform(derive_seed(seed, "queries"), 1.0).tensor(vec![h * w, c]),
            embed: Linear::seeded(d * k, c, derive_seed(seed, "embed")),
            memory: MemoryParams::seeded(c, d, k, derive_seed(seed, "memory")),
            layers,
            action_proj: Linear::seeded(slot_width(&config.fourier), c, derive_seed(seed, "action")),
            heads: HeadParams::seeded(c, d, k, derive_seed(seed, "heads")),
        })
    }

    /// Zeroes every attention, action and feed-forward output projection.
    pub fn zero_output_projections(&mut self) {
        let c = self.config.channels;
        for l in &mut self.layers {
            l.self_attn.output = Linear::zeros(c, c);
            l.temporal_attn.output = Linear::zeros(c, c);
            l.action_attn.output = Linear::zeros(c, c);
            l.ffn.output = Linear::zeros(self.config.ffn_hidden, c);
        }
    }

    pub fn new_memory(&self) -> Result<MemoryQueue<T>> {
        MemoryQueue::new(self.config.memory_capacity)
    }

    pub fn bev_shape(&self) -> Vec<usize> {
        vec![self.grid.h(), self.grid.w(), self.config.channels]
    }

    /// Heads applied to an embedding: `(logits, flow)`.
    pub fn predict(&self, bev: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        channel_to_height_heads(bev, &self.heads)
    }

    pub fn cast<U: Scalar>(&self) -> WorldDecoder<U> {
        let mut out = WorldDecoder::<U>::seeded(self.config, self.grid)
            .expect("config validated on construction");
        let mut src = Vec::new();
        self.visit("", &mut |n, t| src.push((n, t.cast::<U>())));
        let mut it = src.into_iter();
        out.visit_mut("", &mut |_, t| *t = it.next().expect("same layout").1);
        out
    }
}

impl<T: Scalar> Parameterized<T> for WorldDecoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.queries.visit(&join(prefix, "queries"), f);
        self.embed.visit(&join(prefix, "embed"), f);
        self.memory.visit(&join(prefix, "memory"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        self.action_proj.visit(&join(prefix, "action_proj"), f);
        self.heads.visit(&join(prefix, "heads"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.queries.visit_mut(&join(prefix, "queries"), f);
        self.embed.visit_mut(&join(prefix, "embed"), f);
        self.memory.visit_mut(&join(prefix, "memory"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        self.action_proj.visit_mut(&join(prefix, "action_proj"), f);
        self.heads.visit_mut(&join(prefix, "heads"), f);
    }
}

/// One-hot height slabs `[h, w, d * categories]` of a semantic grid.
pub fn one_hot_slabs<T: Scalar>(grid: &SemanticGrid, categories: usize) -> Tensor<T> {
    let (h, w, d) = grid.config().dims();
    let mut data = vec![T::zero(); h * w * d * categories];
    for (idx, &l) in grid.labels().iter().enumerate() {
        data[idx * categories + l as usize] = T::one();
    }
    Tensor::raw(vec![h, w, d * categories], data)
}

/// Stand-in camera encoder: per-cell linear embedding of the one-hot slabs.
pub fn encode_observation<T: Scalar>(frame: &GridFrame, embed: &Linear<T>) -> Result<BevEmbedding<T>> {
    let categories = embed.inputs() / frame.semantic.config().d();
    let slabs = one_hot_slabs::<T>(&frame.semantic, categories);
    Ok(BevEmbedding {
        t: frame.t as i64,
        features: embed.forward(&slabs)?,
        ego_pose_world: frame.ego_pose_world,
    })
}

fn residual<T: Scalar>(x: &mut Tensor<T>, delta: &Tensor<T>) {
    for (a, &b) in x.data_mut().iter_mut().zip(delta.data()) {
        *a = *a + b;
    }
}

/// Predicts the next embedding from the memory and this step's actions.
pub fn decode_next<T: Scalar>(
    q: &MemoryQueue<T>,
    actions: &[ActionCondition],
    dec: &WorldDecoder<T>,
) -> Result<BevEmbedding<T>> {
    let last = q.last().ok_or(Error::EmptyMemory)?;
    let cfg = &dec.config;
    let grid = &dec.grid;
    let (h, w, _) = grid.dims();
    let c = cfg.channels;
    let target_pose = last
        .ego_pose_world
        .compose(&implied_motion(actions, cfg.dt));
    let to_target = target_pose.inverse();

    let own_refs = temporal_reference_points(grid, &EgoPose::identity());
    let entry_refs: Vec<Vec<[f64; 2]>> = q
        .entries()
        .iter()
        .map(|e| temporal_reference_points(grid, &to_target.compose(&e.ego_pose_world)))
        .collect();
    for e in q.entries() {
        if e.features.shape() != [h, w, c] {
            return Err(Error::ShapeMismatch {
                left: e.features.shape().to_vec(),
                right: vec![h, w, c],
                context: "memory entry features",
            });
        }
    }
    let token = unify_conditions(actions, &cfg.fourier, &dec.action_proj)?;

    let mut x = dec.queries.clone();
    for layer in &dec.layers {
        let normed = layer_norm_noaffine(&x);
        let map = normed.clone().reshape(vec![h, w, c])?;
        let d = layer.self_attn.forward(&normed, &[(&map, &own_refs)])?;
        residual(&mut x, &d);

        let normed = layer_norm_noaffine(&x);
        let sources: Vec<(&Tensor<T>, &[[f64; 2]])> = q
            .entries()
            .iter()
            .zip(&entry_refs)
            .map(|(e, r)| (&e.features, r.as_slice()))
            .collect();
        let d = layer.temporal_attn.forward(&normed, &sources)?;
        residual(&mut x, &d);

        let a = layer
            .action_attn
            .output
            .forward(&layer.action_attn.value.forward(&token)?)?;
        for row in x.data_mut().chunks_exact_mut(c) {
            for (v, &b) in row.iter_mut().zip(a.data()) {
                *v = *v + b;
            }
        }

        let normed = layer_norm_noaffine(&x);
        let d = layer.ffn.forward(&normed)?;
        residual(&mut x, &d);
    }
    Ok(BevEmbedding {
        t: last.t + 1,
        features: x.reshape(vec![h, w, c])?,
        ego_pose_world: target_pose,
    })
}

/// Everything produced by a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout<T> {
    pub frames: Vec<(SemanticGrid, FlowGrid)>,
    pub logits: Vec<Tensor<T>>,
    pub flows: Vec<Tensor<T>>,
    pub embeddings: Vec<BevEmbedding<T>>,
    pub memory: MemoryQueue<T>,
}

/// Autoregressive forecast: decode, predict, feed the prediction back into memory.
pub fn rollout_forecast<T: Scalar>(
    q: &MemoryQueue<T>,
    actions: &[Vec<ActionCondition>],
    dec: &WorldDecoder<T>,
) -> Result<Rollout<T>> {
    if actions.len() != dec.config.horizon {
        return Err(Error::ActionCountMismatch {
            expected: dec.config.horizon,
            got: actions.len(),
        });
    }
    rollout_steps(q, actions, dec)
}

/// Like [`rollout_forecast`] for any number of steps.
pub fn rollout_steps<T: Scalar>(
    q: &MemoryQueue<T>,
    actions: &[Vec<ActionCondition>],
    dec: &WorldDecoder<T>,
) -> Result<Rollout<T>> {
    let mut memory = q.clone();
    let mut out = Rollout {
        frames: Vec::with_capacity(actions.len()),
        logits: Vec::new(),
        flows: Vec::new(),
        embeddings: Vec::new(),
        memory: q.clone(),
    };
    for step in actions {
        let e = decode_next(&memory, step, dec)?;
        let (logits, flow) = dec.predict(&e.features)?;
        out.frames.push((
            logits_to_semantic(&logits, &dec.grid)?,
            flow_to_grid(&flow, &dec.grid)?,
        ));
        let ctx = PushContext {
            ego_transform: implied_motion(step, dec.config.dt),
            flow: flow.clone(),
        };
        memory = memory_push(&memory, e.clone(), &ctx, &dec.memory)?;
        out.logits.push(logits);
        out.flows.push(flow);
        out.embeddings.push(e);
    }
    out.memory = memory;
    Ok(out)
}

/// Encodes observed frames and pushes them into a fresh memory. The ego
/// transform of each entry is its pose relative to the last observation;
/// flow comes from the decoder's flow head.
pub fn warm_up<T: Scalar>(frames: &[GridFrame], dec: &WorldDecoder<T>) -> Result<MemoryQueue<T>> {
    let present = frames.last().ok_or(Error::Empty("warm-up frames"))?.ego_pose_world;
    let mut q = dec.new_memory()?;
    for fr in frames {
        let e = encode_observation(fr, &dec.embed)?;
        let (_, flow) = dec.predict(&e.features)?;
        let ctx = PushContext {
            ego_transform: present.inverse().compose(&fr.ego_pose_world),
            flow,
        };
        q = memory_push(&q, e, &ctx, &dec.memory)?;
    }
    Ok(q)
}
