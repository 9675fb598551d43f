use crate::error::{Error, Result};
use crate::grid::{FlowGrid, GridConfig, SemanticGrid};
use crate::scalar::{f, Scalar};
use crate::tensor::{derive_seed, dims3, Linear, Tensor};

use super::condnorm::argmax;
use super::{join, Parameterized};

/// Channel-to-height prediction heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    /// `c -> d * categories`
    pub occupancy: Linear<T>,
    /// `c -> d * 3`
    pub flow: Linear<T>,
    pub depth: usize,
    pub categories: usize,
}

impl<T: Scalar> HeadParams<T> {
    pub fn seeded(c: usize, depth: usize, categories: usize, seed: u64) -> Self {
        Self {
            occupancy: Linear::seeded(c, depth * categories, derive_seed(seed, "occupancy")),
            flow: Linear::seeded(c, depth * 3, derive_seed(seed, "flow")),
            depth,
            categories,
        }
    }

    pub fn zeros(c: usize, depth: usize, categories: usize) -> Self {
        Self {
            occupancy: Linear::zeros(c, depth * categories),
            flow: Linear::zeros(c, depth * 3),
            depth,
            categories,
        }
    }
}

impl<T: Scalar> Parameterized<T> for HeadParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.occupancy.visit(&join(prefix, "occupancy"), f);
        self.flow.visit(&join(prefix, "flow"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.occupancy.visit_mut(&join(prefix, "occupancy"), f);
        self.flow.visit_mut(&join(prefix, "flow"), f);
    }
}

/// `(logits [h, w, d, categories], flow [h, w, d, 3])` from a BEV map `[h, w, c]`.
pub fn channel_to_height_heads<T: Scalar>(
    bev: &Tensor<T>,
    heads: &HeadParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [h, w, _] = dims3(bev, "heads input")?;
    let logits = heads
        .occupancy
        .forward(bev)?
        .reshape(vec![h, w, heads.depth, heads.categories])?;
    let flow = heads.flow.forward(bev)?.reshape(vec![h, w, heads.depth, 3])?;
    Ok((logits, flow))
}

fn check_grid_dims<T: Scalar>(t: &Tensor<T>, cfg: &GridConfig, last: usize, context: &'static str) -> Result<()> {
    let (h, w, d) = cfg.dims();
    if t.shape() != [h, w, d, last] {
        return Err(Error::ShapeMismatch {
            left: t.shape().to_vec(),
            right: vec![h, w, d, last],
            context,
        });
    }
    Ok(())
}

/// Argmax labels; ties go to the lowest category id.
pub fn logits_to_semantic<T: Scalar>(logits: &Tensor<T>, cfg: &GridConfig) -> Result<SemanticGrid> {
    check_grid_dims(logits, cfg, logits.last_dim(), "logits to grid")?;
    let labels = logits.rows().map(|row| argmax(row) as u8).collect();
    SemanticGrid::new(*cfg, labels)
}

pub fn flow_to_grid<T: Scalar>(flow: &Tensor<T>, cfg: &GridConfig) -> Result<FlowGrid> {
    check_grid_dims(flow, cfg, 3, "flow to grid")?;
    FlowGrid::new(*cfg, flow.data().iter().map(|&v| f(v) as f32).collect())
}
