//! Network building blocks shared by the memory queue, the world decoder and the planner.

mod attention;
mod checkpoint;
mod condnorm;
mod fourier;
mod heads;

pub use attention::{deformable_attention, AttnTrace, DeformAttnParams};
pub use checkpoint::{load_checkpoint, read_checkpoint, write_checkpoint};
pub use condnorm::{
    agent_motion_cond_params, conditional_normalize, conditional_normalize_backward,
    ego_motion_cond_params, semantic_cond_params, AgentCondGen, CondNormGrads, CondNormParams,
    CondSource, EgoCondGen, SemanticCondGen,
};
pub use fourier::{
    fourier_embed, slot_layout, slot_width, unified_slots, unify_conditions, FourierSpec};
pub use heads::{
    channel_to_height_heads, flow_to_grid, logits_to_semantic, HeadParams,
};

use crate::scalar::Scalar;
use crate::tensor::{derive_seed, Linear, Tensor};

/// Walks the named parameter tensors of a module.
pub trait Parameterized<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Scalar> Parameterized<T> for Tensor<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(prefix.to_string(), self);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(prefix.to_string(), self);
    }
}

/// Two-layer ReLU MLP over the trailing axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn seeded(c: usize, hidden: usize, seed: u64) -> Self {
        Self {
            hidden: Linear::seeded(c, hidden, derive_seed(seed, "hidden")),
            output: Linear::seeded(hidden, c, derive_seed(seed, "output")),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> crate::Result<Tensor<T>> {
        let h = self.hidden.forward(x)?.map(|v| v.max(T::zero()));
        self.output.forward(&h)
    }
}

impl<T: Scalar> Parameterized<T> for FeedForward<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}
