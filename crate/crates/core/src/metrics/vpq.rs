use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{category, FlowGrid, GridConfig, InstanceGrid, SemanticGrid};
use crate::scalar::{f, Scalar};
use crate::tensor::Tensor;

use super::EvalConfig;

/// Per-voxel GMO probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityField {
    config: GridConfig,
    values: Vec<f64>,
}

impl ProbabilityField {
    pub fn new(config: GridConfig, values: Vec<f64>) -> Result<Self> {
        if values.len() != config.len() {
            return Err(Error::LengthMismatch(values.len(), config.len()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::NonFinite(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self { config, values })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Hard labels as probabilities: 1 on GMO voxels, 0 elsewhere.
pub fn gmo_probability(grid: &SemanticGrid) -> ProbabilityField {
    ProbabilityField {
        config: *grid.config(),
        values: grid
            .labels()
            .iter()
            .map(|&l| if category::is_gmo(l) { 1.0 } else { 0.0 })
            .collect(),
    }
}

/// Softmax mass of the GMO categories from logits `[h, w, d, C]`.
pub fn gmo_probability_from_logits<T: Scalar>(logits: &Tensor<T>, cfg: &GridConfig) -> Result<ProbabilityField> {
    let c = logits.last_dim();
    if logits.len() != cfg.len() * c || c < category::COUNT {
        return Err(Error::ShapeMismatch {
            left: logits.shape().to_vec(),
            right: vec![cfg.h(), cfg.w(), cfg.d(), category::COUNT],
            context: "gmo probability logits",
        });
    }
    let values = logits
        .rows()
        .map(|row| {
            let m = row.iter().map(|&v| f(v)).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (f(v) - m).exp()).sum();
            let g: f64 = category::GMO.iter().map(|&k| (f(row[k as usize]) - m).exp()).sum();
            (g / z).clamp(0.0, 1.0)
        })
        .collect();
    Ok(ProbabilityField { config: *cfg, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsCenter {
    pub voxel: [usize; 3],
    pub position: [f64; 3],
    pub score: f64,
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Greedy non-maximum suppression over voxels scoring at least `min_score`:
/// highest score first (ties by voxel index), dropping anything within
/// `radius` meters of a kept center.
pub fn nms_centers(field: &ProbabilityField, radius: f64, min_score: f64) -> Vec<NmsCenter> {
    let cfg = field.config;
    let mut order: Vec<usize> = (0..field.values.len())
        .filter(|&i| field.values[i] >= min_score && field.values[i] > 0.0)
        .collect();
    order.sort_by(|&a, &b| field.values[b].total_cmp(&field.values[a]).then(a.cmp(&b)));
    let r2 = radius * radius;
    let mut kept: Vec<NmsCenter> = Vec::new();
    for idx in order {
        let voxel = cfg.unindex(idx);
        let position = cfg.voxel_to_world(voxel);
        if kept.iter().all(|k| dist2(k.position, position) > r2) {
            kept.push(NmsCenter {
                voxel,
                position,
                score: field.values[idx],
            });
        }
    }
    kept
}

/// Single-linkage clusters (pairs closer than `merge`) replaced by centroids,
/// ordered by their first member.
pub fn cluster_centers(centers: &[[f64; 3]], merge: f64) -> Vec<[f64; 3]> {
    let n = centers.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let m2 = merge * merge;
    for i in 0..n {
        for j in i + 1..n {
            if dist2(centers[i], centers[j]) < m2 {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<(usize, [f64; 3], usize)> = Vec::new();
    for i in 0..n {
        let r = root(&mut parent, i);
        match groups.iter_mut().find(|g| g.0 == r) {
            Some(g) => {
                for a in 0..3 {
                    g.1[a] += centers[i][a];
                }
                g.2 += 1;
            }
            None => groups.push((r, centers[i], 1)),
        }
    }
    groups
        .into_iter()
        .map(|(_, s, k)| s.map(|v| v / k as f64))
        .collect()
}

/// Voxel sets of one instance over a sequence of frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTrack {
    pub id: u32,
    /// Sorted linear voxel indices per frame.
    pub frames: Vec<Vec<usize>>,
}

fn nearest(centers: &[[f64; 3]], p: [f64; 3]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &c) in centers.iter().enumerate() {
        let d = dist2(c, p);
        if best.is_none_or(|b| d < b.1) {
            best = Some((i, d));
        }
    }
    best
}

fn centroid(cfg: &GridConfig, voxels: &[usize]) -> Option<[f64; 3]> {
    if voxels.is_empty() {
        return None;
    }
    let mut s = [0.0; 3];
    for &v in voxels {
        let p = cfg.voxel_to_world(cfg.unindex(v));
        for a in 0..3 {
            s[a] += p[a];
        }
    }
    Some(s.map(|x| x / voxels.len() as f64))
}

/// Tracks from frame-0 centers: frame-0 GMO voxels go to the nearest center;
/// later GMO voxels follow their backward flow to the nearest previous-frame
/// track center within `gate`. Track centers move to their voxel centroid.
pub fn associate_instances(
    centers: &[[f64; 3]],
    occupancy: &[SemanticGrid],
    flow: &[FlowGrid],
    gate: f64,
) -> Result<Vec<InstanceTrack>> {
    if occupancy.len() != flow.len() {
        return Err(Error::LengthMismatch(occupancy.len(), flow.len()));
    }
    let Some(first) = occupancy.first() else {
        return Ok(Vec::new());
    };
    let cfg = *first.config();
    for (o, fl) in occupancy.iter().zip(flow) {
        cfg.check_same(o.config(), "association occupancy")?;
        cfg.check_same(fl.config(), "association flow")?;
    }
    let n_frames = occupancy.len();
    let mut sets: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); n_frames]; centers.len()];
    let gmo = |g: &SemanticGrid| -> Vec<usize> {
        g.labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| category::is_gmo(l))
            .map(|(i, _)| i)
            .collect()
    };
    for v in gmo(first) {
        if let Some((k, _)) = nearest(centers, cfg.voxel_to_world(cfg.unindex(v))) {
            sets[k][0].push(v);
        }
    }
    // tracks without birth voxels are dropped
    let alive: Vec<usize> = (0..centers.len()).filter(|&k| !sets[k][0].is_empty()).collect();
    let mut prev: Vec<[f64; 3]> = alive
        .iter()
        .map(|&k| centroid(&cfg, &sets[k][0]).expect("nonempty"))
        .collect();
    let g2 = gate * gate;
    for t in 1..n_frames {
        for v in gmo(&occupancy[t]) {
            let p = cfg.voxel_to_world(cfg.unindex(v));
            let fv = flow[t].get(v);
            let target = [p[0] + fv[0], p[1] + fv[1], p[2] + fv[2]];
            if let Some((a, d)) = nearest(&prev, target) {
                if d <= g2 {
                    sets[alive[a]][t].push(v);
                }
            }
        }
        for (a, &k) in alive.iter().enumerate() {
            if let Some(c) = centroid(&cfg, &sets[k][t]) {
                prev[a] = c;
            }
        }
    }
    Ok(alive
        .iter()
        .enumerate()
        .map(|(n, &k)| InstanceTrack {
            id: n as u32 + 1,
            frames: std::mem::take(&mut sets[k]),
        })
        .collect())
}

/// NMS, clustering and association on a predicted sequence. `prob0` is the
/// GMO probability of frame 0.
pub fn predicted_tracks(
    prob0: &ProbabilityField,
    occupancy: &[SemanticGrid],
    flow: &[FlowGrid],
    cfg: &EvalConfig,
) -> Result<Vec<InstanceTrack>> {
    let raw: Vec<[f64; 3]> = nms_centers(prob0, cfg.nms_radius, cfg.nms_min_score)
        .iter()
        .map(|c| c.position)
        .collect();
    let centers = cluster_centers(&raw, cfg.cluster_merge);
    associate_instances(&centers, occupancy, flow, cfg.gate())
}

/// Ground-truth tracks keyed by instance id, in ascending id order.
pub fn gt_tracks(instances: &[InstanceGrid]) -> Vec<InstanceTrack> {
    let mut ids: Vec<u16> = instances.iter().flat_map(|g| g.distinct()).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.iter()
        .map(|&id| InstanceTrack {
            id: id as u32,
            frames: instances
                .iter()
                .map(|g| {
                    g.ids()
                        .iter()
                        .enumerate()
                        .filter(|(_, &i)| i == id)
                        .map(|(v, _)| v)
                        .collect()
                })
                .collect(),
        })
        .collect()
}

fn sorted_iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy one-to-one matching by descending IoU above `threshold`.
fn match_frame(pred: &[&[usize]], gt: &[&[usize]], threshold: f64) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for (p, ps) in pred.iter().enumerate() {
        for (g, gs) in gt.iter().enumerate() {
            if ps.is_empty() || gs.is_empty() {
                continue;
            }
            let iou = sorted_iou(ps, gs);
            if iou > threshold {
                pairs.push((p, g, iou));
            }
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut out = Vec::new();
    for (p, g, iou) in pairs {
        if !used_p[p] && !used_g[g] {
            used_p[p] = true;
            used_g[g] = true;
            out.push((p, g, iou));
        }
    }
    out
}

/// Video panoptic quality averaged over every frame of the tracks
/// (present plus future). A matched pair is a true positive only when the
/// same pair was matched at frame 0; otherwise it counts as one false
/// positive and one false negative. Frames without segments score 1.
pub fn vpq_f(pred: &[InstanceTrack], gt: &[InstanceTrack], threshold: f64) -> Result<f64> {
    let n = pred
        .iter()
        .chain(gt)
        .map(|t| t.frames.len())
        .max()
        .ok_or(Error::Empty("vpq tracks"))?;
    if let Some(t) = pred.iter().chain(gt).find(|t| t.frames.len() != n) {
        return Err(Error::LengthMismatch(t.frames.len(), n));
    }
    let mut frame0: Vec<Option<usize>> = vec![None; pred.len()];
    let mut total = 0.0;
    for t in 0..n {
        let ps: Vec<&[usize]> = pred.iter().map(|tr| tr.frames[t].as_slice()).collect();
        let gs: Vec<&[usize]> = gt.iter().map(|tr| tr.frames[t].as_slice()).collect();
        let n_pred = ps.iter().filter(|s| !s.is_empty()).count();
        let n_gt = gs.iter().filter(|s| !s.is_empty()).count();
        let matches = match_frame(&ps, &gs, threshold);
        if t == 0 {
            for &(p, g, _) in &matches {
                frame0[p] = Some(g);
            }
        }
        let mut tp = 0usize;
        let mut iou_sum = 0.0;
        for &(p, g, iou) in &matches {
            if frame0[p] == Some(g) {
                tp += 1;
                iou_sum += iou;
            }
        }
        let fp = n_pred - tp;
        let fn_ = n_gt - tp;
        let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64;
        total += if denom == 0.0 { 1.0 } else { iou_sum / denom };
    }
    Ok(total / n as f64)
}
