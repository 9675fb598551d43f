//! Occupancy, instance and planning metrics.

mod vpq;

pub use vpq::{
    associate_instances, cluster_centers, gmo_probability, gmo_probability_from_logits,
    gt_tracks, nms_centers, predicted_tracks, vpq_f, InstanceTrack, NmsCenter, ProbabilityField,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{binary_iou, category, category_mask, SemanticGrid};
use crate::planner::{footprint_hits, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    NoAvg,
    TemAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrVariant {
    Stepwise,
    Cumulative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub categories: Vec<u8>,
    pub tp_threshold: f64,
    /// Meters.
    pub nms_radius: f64,
    pub nms_min_score: f64,
    pub cluster_merge: f64,
    /// Association gate; `None` means twice the NMS radius.
    pub gating_distance: Option<f64>,
    pub protocol: Protocol,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            categories: vec![
                category::DRIVABLE,
                category::STATIC,
                category::VEHICLE,
                category::PEDESTRIAN,
            ],
            tp_threshold: 0.2,
            nms_radius: 1.0,
            nms_min_score: 0.5,
            cluster_merge: 3.0,
            gating_distance: None,
            protocol: Protocol::NoAvg,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(&c) = self.categories.iter().find(|&&c| c as usize >= category::COUNT) {
            return Err(Error::UnknownCategory(c));
        }
        if !(self.tp_threshold > 0.0 && self.tp_threshold < 1.0) {
            return Err(Error::InvalidConfig("tp_threshold must lie in (0, 1)".into()));
        }
        if !(self.nms_radius > 0.0 && self.cluster_merge > 0.0) {
            return Err(Error::InvalidConfig("radii must be > 0".into()));
        }
        if self.gating_distance.is_some_and(|g| !(g > 0.0)) {
            return Err(Error::InvalidConfig("gating distance must be > 0".into()));
        }
        Ok(())
    }

    pub fn gate(&self) -> f64 {
        self.gating_distance.unwrap_or(2.0 * self.nms_radius)
    }
}

/// IoU of one category, `None` when neither grid contains it.
pub fn category_iou(pred: &SemanticGrid, gt: &SemanticGrid, cat: u8) -> Result<Option<f64>> {
    pred.config().check_same(gt.config(), "category iou")?;
    let p = category_mask(pred, &[cat])?;
    let g = category_mask(gt, &[cat])?;
    if p.count() == 0 && g.count() == 0 {
        return Ok(None);
    }
    binary_iou(&p, &g).map(Some)
}

/// Mean IoU over the scored categories present in either grid; 1 when none are.
pub fn miou_c(pred: &SemanticGrid, gt: &SemanticGrid, cats: &[u8]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for &c in cats {
        if let Some(v) = category_iou(pred, gt, c)? {
            sum += v;
            n += 1;
        }
    }
    Ok(if n == 0 { 1.0 } else { sum / n as f64 })
}

fn per_frame(pred: &[SemanticGrid], gt: &[SemanticGrid], cats: &[u8]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(Error::Empty("metric sequence"));
    }
    pred.iter().zip(gt).map(|(p, g)| miou_c(p, g, cats)).collect()
}

/// Mean of per-frame mIoU over the future frames.
pub fn miou_f(pred: &[SemanticGrid], gt: &[SemanticGrid], cats: &[u8]) -> Result<f64> {
    let v = per_frame(pred, gt, cats)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// `(1/N) sum_t (1/t) sum_{k<=t} IoU_k` over per-frame IoUs.
pub fn weighted_mean(ious: &[f64]) -> f64 {
    let mut prefix = 0.0;
    let mut acc = 0.0;
    for (t, &v) in ious.iter().enumerate() {
        prefix += v;
        acc += prefix / (t + 1) as f64;
    }
    acc / ious.len() as f64
}

/// Time-weighted mIoU: nested prefix means, so near frames weigh more.
pub fn weighted_miou_f(pred: &[SemanticGrid], gt: &[SemanticGrid], cats: &[u8]) -> Result<f64> {
    Ok(weighted_mean(&per_frame(pred, gt, cats)?))
}

fn check_traj_pair(planned: &Trajectory, expert: &Trajectory) -> Result<()> {
    if planned.len() != expert.len() {
        return Err(Error::LengthMismatch(planned.len(), expert.len()));
    }
    Ok(())
}

/// Euclidean waypoint distance at each horizon step.
pub fn l2_noavg(planned: &Trajectory, expert: &Trajectory) -> Result<Vec<f64>> {
    check_traj_pair(planned, expert)?;
    Ok(planned
        .waypoints
        .iter()
        .zip(&expert.waypoints)
        .map(|(a, b)| (a[0] - b[0]).hypot(a[1] - b[1]))
        .collect())
}

/// Running mean of the per-step distances.
pub fn l2_temavg(planned: &Trajectory, expert: &Trajectory) -> Result<Vec<f64>> {
    check_traj_pair(planned, expert)?;
    let mut out = Vec::with_capacity(planned.len());
    let mut sum = 0.0;
    for (k, (a, b)) in planned.waypoints.iter().zip(&expert.waypoints).enumerate() {
        sum += (a[0] - b[0]).hypot(a[1] - b[1]);
        out.push(sum / (k + 1) as f64);
    }
    Ok(out)
}

pub fn l2_error(planned: &Trajectory, expert: &Trajectory, protocol: Protocol) -> Result<Vec<f64>> {
    match protocol {
        Protocol::NoAvg => l2_noavg(planned, expert),
        Protocol::TemAvg => l2_temavg(planned, expert),
    }
}

/// Per-step footprint/obstacle overlap of a planned trajectory. Step `k` is
/// checked against `obstacles[k]`; obstacles are GMO plus static voxels.
pub fn collision_indicators(
    planned: &Trajectory,
    obstacles: &[SemanticGrid],
    footprint: (f64, f64),
) -> Result<Vec<bool>> {
    if obstacles.len() < planned.len() {
        return Err(Error::LengthMismatch(planned.len(), obstacles.len()));
    }
    Ok(planned
        .waypoints
        .iter()
        .zip(planned.headings())
        .zip(obstacles)
        .map(|((wp, h), g)| footprint_hits(g, *wp, h, footprint, &category::OBSTACLES))
        .collect())
}

/// Fraction of scenes colliding at each horizon step.
pub fn collision_rate_from_indicators(per_scene: &[Vec<bool>], variant: CrVariant) -> Result<Vec<f64>> {
    let horizon = per_scene.first().map_or(0, Vec::len);
    if let Some(s) = per_scene.iter().find(|s| s.len() != horizon) {
        return Err(Error::LengthMismatch(horizon, s.len()));
    }
    if per_scene.is_empty() {
        return Ok(Vec::new());
    }
    let n = per_scene.len() as f64;
    Ok((0..horizon)
        .map(|t| {
            let hits = per_scene
                .iter()
                .filter(|s| match variant {
                    CrVariant::Stepwise => s[t],
                    CrVariant::Cumulative => s[..=t].iter().any(|&c| c),
                })
                .count();
            hits as f64 / n
        })
        .collect())
}

pub fn collision_rate(
    planned: &[Trajectory],
    obstacles: &[Vec<SemanticGrid>],
    footprint: (f64, f64),
    variant: CrVariant,
) -> Result<Vec<f64>> {
    if planned.len() != obstacles.len() {
        return Err(Error::LengthMismatch(planned.len(), obstacles.len()));
    }
    let ind = planned
        .iter()
        .zip(obstacles)
        .map(|(p, o)| collision_indicators(p, o, footprint))
        .collect::<Result<Vec<_>>>()?;
    collision_rate_from_indicators(&ind, variant)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2Report {
    #[serde(rename = "NoAvg")]
    pub no_avg: Vec<f64>,
    #[serde(rename = "TemAvg")]
    pub tem_avg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrReport {
    pub stepwise: Vec<f64>,
    pub cumulative: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    /// `None` when the category is absent from both present-frame grids.
    #[serde(rename = "mIoU_c")]
    pub miou_c: Option<f64>,
    #[serde(rename = "mIoU_f")]
    pub miou_f: Option<f64>,
}

/// Metric report; planning fields are absent when no trajectories were given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "mIoU_c")]
    pub miou_c: f64,
    #[serde(rename = "mIoU_f")]
    pub miou_f: f64,
    #[serde(rename = "weighted_mIoU_f")]
    pub weighted_miou_f: f64,
    #[serde(rename = "VPQ_f")]
    pub vpq_f: Option<f64>,
    #[serde(rename = "L2")]
    pub l2: Option<L2Report>,
    #[serde(rename = "CR")]
    pub cr: Option<CrReport>,
    pub per_category: BTreeMap<String, CategoryReport>,
}

/// Occupancy part of the report. `pred[0]`/`gt[0]` are the present frame and
/// the rest the future frames.
pub fn occupancy_report(pred: &[SemanticGrid], gt: &[SemanticGrid], cfg: &EvalConfig) -> Result<MetricReport> {
    cfg.validate()?;
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.len() < 2 {
        return Err(Error::Empty("need a present frame and at least one future frame"));
    }
    let (fp, fg) = (&pred[1..], &gt[1..]);
    let mut per_category = BTreeMap::new();
    for &c in &cfg.categories {
        let present = category_iou(&pred[0], &gt[0], c)?;
        let future: Vec<f64> = fp
            .iter()
            .zip(fg)
            .map(|(p, g)| category_iou(p, g, c))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let miou_f = (!future.is_empty()).then(|| future.iter().sum::<f64>() / future.len() as f64);
        per_category.insert(
            category::name(c).to_string(),
            CategoryReport {
                miou_c: present,
                miou_f,
            },
        );
    }
    Ok(MetricReport {
        miou_c: miou_c(&pred[0], &gt[0], &cfg.categories)?,
        miou_f: miou_f(fp, fg, &cfg.categories)?,
        weighted_miou_f: weighted_miou_f(fp, fg, &cfg.categories)?,
        vpq_f: None,
        l2: None,
        cr: None,
        per_category,
    })
}
