//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use occplan_cli::{cmd_rollout, cmd_rollout_manifest, ActionSource, RolloutArgs};
use occplan_core::action::{ActionCondition, Command};
use occplan_core::decoder::{
    bce_occupancy, cross_entropy, decode_next, l1_masked, memory_push, rollout_forecast, warm_up,
    BevEmbedding, MemoryParams, MemoryQueue, PushContext, WorldDecoder, WorldDecoderConfig,
};
use occplan_core::grid::{category, EgoPose, FlowGrid, GridConfig, InstanceGrid, SemanticGrid};
use occplan_core::metrics::{
    collision_indicators, collision_rate, collision_rate_from_indicators, gmo_probability,
    gt_tracks, l2_noavg, l2_temavg, miou_c, miou_f, predicted_tracks, vpq_f, weighted_mean,
    weighted_miou_f, CrVariant, EvalConfig,
};
use occplan_core::neural::{conditional_normalize, conditional_normalize_backward, CondNormParams, CondSource};
use occplan_core::planner::{
    closed_loop_rollout, command_allows, plan_loss, select_index, select_trajectory, CostBreakdown,
    PlannerConfig, Trajectory,
};
use occplan_core::synthworld::{generate_random_scenario, rasterize_frame, AgentSpec, Difficulty, Rect, Scenario};
use occplan_core::tensor::{
    bilinear_sample_2d, bilinear_sample_2d_backward, layer_norm_backward, layer_norm_noaffine, Linear, Tensor,
};
use occplan_core::world::{OracleWorld, WorldKind};
use occplan_core::EngineConfig;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---------------------------------------------------------------- metric oracles

const CATS: [u8; 4] = [1, 2, 3, 4];

fn random_grid_cfg(rng: &mut ChaCha8Rng) -> GridConfig {
    let h = rng.gen_range(4..=16usize) as f64;
    let w = rng.gen_range(4..=16usize) as f64;
    let d = rng.gen_range(1..=4usize) as f64;
    GridConfig::new((-h / 2.0, h / 2.0), (-w / 2.0, w / 2.0), (0.0, d), 1.0).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.gen_range(0..5u8)).collect()
}

fn perturb(rng: &mut ChaCha8Rng, src: &[u8], p: f64) -> Vec<u8> {
    src.iter()
        .map(|&l| if rng.gen_bool(p) { rng.gen_range(0..5u8) } else { l })
        .collect()
}

fn brute_miou(pred: &[u8], gt: &[u8], dims: (usize, usize, usize)) -> f64 {
    let (h, w, d) = dims;
    let mut sum = 0.0;
    let mut n = 0;
    for &c in &CATS {
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let v = (i * w + j) * d + k;
                    let (a, b) = (pred[v] == c, gt[v] == c);
                    if a && b {
                        inter += 1;
                    }
                    if a || b {
                        union += 1;
                    }
                }
            }
        }
        if union > 0 {
            sum += inter as f64 / union as f64;
            n += 1;
        }
    }
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

fn brute_weighted(ious: &[f64]) -> f64 {
    let n = ious.len();
    let mut acc = 0.0;
    for t in 1..=n {
        let mut inner = 0.0;
        for v in &ious[..t] {
            inner += v;
        }
        acc += inner / t as f64;
    }
    acc / n as f64
}

fn voxel_set(ids: &[u16], id: u16) -> BTreeSet<usize> {
    ids.iter().enumerate().filter(|(_, &v)| v == id).map(|(i, _)| i).collect()
}

fn set_iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Direct VPQ over raw id grids: ids ascending are the tie-break order.
fn brute_vpq(pred: &[Vec<u16>], gt: &[Vec<u16>], thr: f64) -> f64 {
    let ids = |seq: &[Vec<u16>]| -> Vec<u16> {
        let s: BTreeSet<u16> = seq.iter().flatten().copied().filter(|&i| i != 0).collect();
        s.into_iter().collect()
    };
    let (pid, gid) = (ids(pred), ids(gt));
    let mut first: Vec<Option<usize>> = vec![None; pid.len()];
    let mut total = 0.0;
    for t in 0..gt.len() {
        let ps: Vec<BTreeSet<usize>> = pid.iter().map(|&i| voxel_set(&pred[t], i)).collect();
        let gs: Vec<BTreeSet<usize>> = gid.iter().map(|&i| voxel_set(&gt[t], i)).collect();
        let mut up = vec![false; ps.len()];
        let mut ug = vec![false; gs.len()];
        let mut matches = Vec::new();
        loop {
            let mut best: Option<(usize, usize, f64)> = None;
            for p in 0..ps.len() {
                for g in 0..gs.len() {
                    if up[p] || ug[g] || ps[p].is_empty() || gs[g].is_empty() {
                        continue;
                    }
                    let v = set_iou(&ps[p], &gs[g]);
                    if v > thr && best.is_none_or(|b| v > b.2) {
                        best = Some((p, g, v));
                    }
                }
            }
            let Some((p, g, v)) = best else { break };
            up[p] = true;
            ug[g] = true;
            matches.push((p, g, v));
        }
        if t == 0 {
            for &(p, g, _) in &matches {
                first[p] = Some(g);
            }
        }
        let np = ps.iter().filter(|s| !s.is_empty()).count();
        let ng = gs.iter().filter(|s| !s.is_empty()).count();
        let mut tp = 0;
        let mut iou = 0.0;
        for &(p, g, v) in &matches {
            if first[p] == Some(g) {
                tp += 1;
                iou += v;
            }
        }
        let denom = tp as f64 + 0.5 * (np - tp) as f64 + 0.5 * (ng - tp) as f64;
        total += if denom == 0.0 { 1.0 } else { iou / denom };
    }
    total / gt.len() as f64
}

fn random_ids(rng: &mut ChaCha8Rng, n: usize, k: u16) -> Vec<u16> {
    // blobs along the flat index so instances have some extent
    let mut ids = vec![0u16; n];
    for id in 1..=k {
        let start = rng.gen_range(0..n);
        let len = rng.gen_range(1..=(n / 4).max(1));
        for v in ids.iter_mut().skip(start).take(len) {
            *v = id;
        }
    }
    ids
}

fn pred_ids(rng: &mut ChaCha8Rng, gt: &[u16], k: u16) -> Vec<u16> {
    let swap = rng.gen_bool(0.3);
    gt.iter()
        .map(|&i| {
            let mut i = if rng.gen_bool(0.1) { rng.gen_range(0..=k) } else { i };
            if swap && i > 0 {
                i = k + 1 - i;
            }
            i
        })
        .collect()
}

fn brute_footprint_hit(g: &SemanticGrid, c: [f64; 2], heading: f64, fp: (f64, f64)) -> bool {
    let cfg = g.config();
    let (h, w, d) = cfg.dims();
    let r = cfg.resolution();
    let (x0, y0) = (cfg.x_range().0, cfg.y_range().0);
    for i in 0..h {
        for j in 0..w {
            let px = x0 + (i as f64 + 0.5) * r;
            let py = y0 + (j as f64 + 0.5) * r;
            let (dx, dy) = (px - c[0], py - c[1]);
            let lx = heading.cos() * dx + heading.sin() * dy;
            let ly = -heading.sin() * dx + heading.cos() * dy;
            if lx.abs() > 0.5 * fp.0 + 1e-9 || ly.abs() > 0.5 * fp.1 + 1e-9 {
                continue;
            }
            for k in 0..d {
                if category::OBSTACLES.contains(&g.labels()[(i * w + j) * d + k]) {
                    return true;
                }
            }
        }
    }
    false
}

fn brute_indicators(traj: &[[f64; 2]], obstacles: &[SemanticGrid], fp: (f64, f64)) -> Vec<bool> {
    let mut heading = 0.0f64;
    let mut prev = [0.0, 0.0];
    let mut out = Vec::new();
    for (k, p) in traj.iter().enumerate() {
        let (dx, dy) = (p[0] - prev[0], p[1] - prev[1]);
        if (dx * dx + dy * dy).sqrt() > 1e-9 {
            heading = dy.atan2(dx);
        }
        prev = *p;
        out.push(brute_footprint_hit(&obstacles[k], *p, heading, fp));
    }
    out
}

fn brute_cr(ind: &[Vec<bool>], cumulative: bool) -> Vec<f64> {
    let horizon = ind[0].len();
    (0..horizon)
        .map(|t| {
            let mut hits = 0;
            for s in ind {
                let hit = if cumulative {
                    (0..=t).any(|k| s[k])
                } else {
                    s[t]
                };
                if hit {
                    hits += 1;
                }
            }
            hits as f64 / ind.len() as f64
        })
        .collect()
}

fn close(name: &str, seed: u64, a: f64, b: f64) -> Result<(), String> {
    ensure((a - b).abs() <= 1e-9, || format!("{name} seed {seed}: {a} vs {b}"))
}

fn close_vec(name: &str, seed: u64, a: &[f64], b: &[f64]) -> Result<(), String> {
    ensure(a.len() == b.len(), || format!("{name} seed {seed}: length {} vs {}", a.len(), b.len()))?;
    a.iter().zip(b).try_for_each(|(x, y)| close(name, seed, *x, *y))
}

fn c1_metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut checks = 0usize;
    let mut hits = 0usize;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let cfg = random_grid_cfg(&mut rng);
        let frames = rng.gen_range(2..=4usize);
        let n = cfg.len();

        let gt_l: Vec<Vec<u8>> = (0..frames).map(|_| random_labels(&mut rng, n)).collect();
        let pr_l: Vec<Vec<u8>> = gt_l.iter().map(|g| perturb(&mut rng, g, 0.3)).collect();
        let gt: Vec<SemanticGrid> = gt_l.iter().map(|l| SemanticGrid::new(cfg, l.clone()).unwrap()).collect();
        let pr: Vec<SemanticGrid> = pr_l.iter().map(|l| SemanticGrid::new(cfg, l.clone()).unwrap()).collect();
        let per: Vec<f64> = pr_l.iter().zip(&gt_l).map(|(p, g)| brute_miou(p, g, cfg.dims())).collect();
        close("mIoU_c", seed, ok(miou_c(&pr[0], &gt[0], &CATS))?, per[0])?;
        close("mIoU_f", seed, ok(miou_f(&pr, &gt, &CATS))?, per.iter().sum::<f64>() / frames as f64)?;
        close("weighted mIoU_f", seed, ok(weighted_miou_f(&pr, &gt, &CATS))?, brute_weighted(&per))?;

        let k = rng.gen_range(1..=3u16);
        let gt_ids: Vec<Vec<u16>> = (0..frames).map(|_| random_ids(&mut rng, n, k)).collect();
        let pr_ids: Vec<Vec<u16>> = gt_ids.iter().map(|g| pred_ids(&mut rng, g, k)).collect();
        let to_grids =
            |v: &[Vec<u16>]| -> Vec<InstanceGrid> { v.iter().map(|i| InstanceGrid::new(cfg, i.clone()).unwrap()).collect() };
        let got = ok(vpq_f(&gt_tracks(&to_grids(&pr_ids)), &gt_tracks(&to_grids(&gt_ids)), 0.2))?;
        close("VPQ_f", seed, got, brute_vpq(&pr_ids, &gt_ids, 0.2))?;

        let scenes = rng.gen_range(1..=4usize);
        let horizon = rng.gen_range(1..=6usize);
        let fp = (rng.gen_range(1.0..4.0), rng.gen_range(0.8..2.0));
        let (hx, hy) = (cfg.x_range().1, cfg.y_range().1);
        let mut planned = Vec::new();
        let mut obstacles = Vec::new();
        let mut brute_ind = Vec::new();
        for _ in 0..scenes {
            let wps: Vec<[f64; 2]> = (0..horizon)
                .map(|_| {
                    if rng.gen_bool(0.15) {
                        [0.0, 0.0]
                    } else {
                        [rng.gen_range(-hx..hx), rng.gen_range(-hy..hy)]
                    }
                })
                .collect();
            let expert: Vec<[f64; 2]> = (0..horizon).map(|_| [rng.gen_range(-hx..hx), rng.gen_range(-hy..hy)]).collect();
            let p = Trajectory::new(wps.clone(), 0.5).unwrap();
            let e = Trajectory::new(expert.clone(), 0.5).unwrap();
            let d: Vec<f64> = wps.iter().zip(&expert).map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()).collect();
            let tem: Vec<f64> = (0..horizon).map(|t| d[..=t].iter().sum::<f64>() / (t + 1) as f64).collect();
            close_vec("L2 NoAvg", seed, &ok(l2_noavg(&p, &e))?, &d)?;
            close_vec("L2 TemAvg", seed, &ok(l2_temavg(&p, &e))?, &tem)?;

            let obs: Vec<SemanticGrid> = (0..horizon)
                .map(|_| {
                    let l: Vec<u8> = (0..n)
                        .map(|_| if rng.gen_bool(0.08) { rng.gen_range(2..5u8) } else { rng.gen_range(0..2u8) })
                        .collect();
                    SemanticGrid::new(cfg, l).unwrap()
                })
                .collect();
            let bi = brute_indicators(&wps, &obs, fp);
            let ci = ok(collision_indicators(&p, &obs, fp))?;
            ensure(bi == ci, || format!("collision indicators seed {seed}: {ci:?} vs {bi:?}"))?;
            hits += bi.iter().filter(|&&b| b).count();
            brute_ind.push(bi);
            planned.push(p);
            obstacles.push(obs);
        }
        close_vec(
            "CR stepwise",
            seed,
            &ok(collision_rate(&planned, &obstacles, fp, CrVariant::Stepwise))?,
            &brute_cr(&brute_ind, false),
        )?;
        close_vec(
            "CR cumulative",
            seed,
            &ok(collision_rate(&planned, &obstacles, fp, CrVariant::Cumulative))?,
            &brute_cr(&brute_ind, true),
        )?;
        checks += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("runtime {secs:.2} s"))?;
    Ok(format!("{checks} instances, {hits} colliding steps, {secs:.2} s"))
}

// ---------------------------------------------------------------- VPQ round trip

fn two_three_agent_scene(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
    let mut scn = generate_random_scenario(seed, Difficulty::Sparse);
    scn.static_obstacles.clear();
    scn.drivable = vec![Rect::new(-50.0, -50.0, 50.0, 50.0)];
    scn.ego0 = EgoPose::identity();
    scn.horizon = 3;
    scn.dt = 0.5;
    let n = rng.gen_range(2..=3usize);
    'retry: loop {
        let agents: Vec<AgentSpec> = (0..n)
            .map(|i| AgentSpec {
                id: i as u16 + 1,
                category: category::VEHICLE,
                footprint: (rng.gen_range(3.8..4.6), rng.gen_range(1.7..2.0)),
                pose0: EgoPose::new(rng.gen_range(-3.14..3.14), rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)),
                speed: rng.gen_range(0.5..2.0),
                yaw_rate: rng.gen_range(-0.2..0.2),
                z_extent: (0.0, 1.5),
            })
            .collect();
        for t in 0..=3 {
            let poses: Vec<EgoPose> = agents.iter().map(|a| a.pose_at(t as f64 * 0.5)).collect();
            for (i, p) in poses.iter().enumerate() {
                if p.x.abs() > 9.0 || p.y.abs() > 9.0 {
                    continue 'retry;
                }
                for q in &poses[i + 1..] {
                    if (p.x - q.x).hypot(p.y - q.y) < 9.0 {
                        continue 'retry;
                    }
                }
            }
        }
        scn.agents = agents;
        return scn;
    }
}

/// Points the backward flow of every agent at frame 1 to the next agent's
/// previous center (cyclically), leaving the other frames untouched.
fn swap_flow(frame: &occplan_core::synthworld::GridFrame, ids: &[u16]) -> FlowGrid {
    let cfg = *frame.flow.config();
    let inst = frame.instances.ids();
    let mut centers = Vec::new();
    for &id in ids {
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for (v, _) in inst.iter().enumerate().filter(|(_, &i)| i == id) {
            let p = cfg.voxel_to_world(cfg.unindex(v));
            let f = frame.flow.get(v);
            for a in 0..3 {
                acc[a] += p[a] + f[a];
            }
            n += 1.0;
        }
        centers.push([acc[0] / n, acc[1] / n, acc[2] / n]);
    }
    let mut vectors = frame.flow.vectors().to_vec();
    for (v, &id) in inst.iter().enumerate() {
        if let Some(a) = ids.iter().position(|&i| i == id) {
            let b = (a + 1) % ids.len();
            for k in 0..3 {
                vectors[3 * v + k] += (centers[b][k] - centers[a][k]) as f32;
            }
        }
    }
    FlowGrid::new(cfg, vectors).unwrap()
}

fn c2_vpq_round_trip() -> Outcome {
    let grid = GridConfig::desk();
    let eval = EvalConfig::default();
    for seed in 0..20u64 {
        let scn = two_three_agent_scene(seed);
        let frames: Vec<_> = (0..=3).map(|t| rasterize_frame(&scn, t, &scn.ego0, &grid).unwrap()).collect();
        let occ: Vec<SemanticGrid> = frames.iter().map(|f| f.semantic.clone()).collect();
        let flow: Vec<FlowGrid> = frames.iter().map(|f| f.flow.clone()).collect();
        let inst: Vec<InstanceGrid> = frames.iter().map(|f| f.instances.clone()).collect();
        let gt = gt_tracks(&inst);
        ensure(gt.len() == scn.agents.len(), || format!("seed {seed}: {} gt tracks", gt.len()))?;
        let prob0 = gmo_probability(&occ[0]);
        let pred = ok(predicted_tracks(&prob0, &occ, &flow, &eval))?;
        let v = ok(vpq_f(&pred, &gt, eval.tp_threshold))?;
        ensure(v == 1.0, || format!("seed {seed}: VPQ_f {v} with {} predicted tracks", pred.len()))?;

        let ids: Vec<u16> = scn.agents.iter().map(|a| a.id).collect();
        let mut swapped = flow.clone();
        swapped[1] = swap_flow(&frames[1], &ids);
        let pred = ok(predicted_tracks(&prob0, &occ, &swapped, &eval))?;
        let v = ok(vpq_f(&pred, &gt, eval.tp_threshold))?;
        ensure(v == 0.25, || format!("seed {seed}: swapped VPQ_f {v}, want 1/(3+1)"))?;
    }
    Ok("20 scenarios at 1.0, swapped at 0.25".into())
}

// ---------------------------------------------------------------- weighted mIoU

fn c3_weighted_miou() -> Outcome {
    let a = weighted_mean(&[1.0, 0.0]);
    let b = weighted_mean(&[0.0, 1.0]);
    ensure(a == 0.75, || format!("{{1,0}} -> {a}"))?;
    ensure(b == 0.25, || format!("{{0,1}} -> {b}"))?;
    let cfg = GridConfig::new((-2.0, 2.0), (-2.0, 2.0), (0.0, 1.0), 1.0).unwrap();
    let mut here = SemanticGrid::free(cfg);
    here.set([0, 0, 0], category::VEHICLE);
    let mut there = SemanticGrid::free(cfg);
    there.set([3, 3, 0], category::VEHICLE);
    let cats = [category::VEHICLE];
    let g1 = ok(weighted_miou_f(&[here.clone(), here.clone()], &[here.clone(), there.clone()], &cats))?;
    let g2 = ok(weighted_miou_f(&[here.clone(), here.clone()], &[there, here], &cats))?;
    ensure(g1 == 0.75 && g2 == 0.25, || format!("from grids: {g1}, {g2}"))?;
    Ok("0.75 and 0.25 exact".into())
}

// ---------------------------------------------------------------- gradients

const FD_STEP: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Max relative error of `analytic` against central differences of `loss` in `x`.
fn fd_check(x: &Tensor<f64>, analytic: &Tensor<f64>, mut loss: impl FnMut(&Tensor<f64>) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += FD_STEP;
        let mut m = x.clone();
        m.data_mut()[i] -= FD_STEP;
        let num = (loss(&p) - loss(&m)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic.data()[i], num));
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn c4_gradients() -> Outcome {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|w| w.0 == name) {
        Some(w) => w.1 = w.1.max(e),
        None => worst.push((name, e)),
    };
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);

        let x = rand_tensor(&mut rng, vec![3, 6], 2.0);
        let r = rand_tensor(&mut rng, vec![3, 6], 1.0);
        let g = ok(layer_norm_backward(&x, &r))?;
        record("layer norm", fd_check(&x, &g, |x| dot(&layer_norm_noaffine(x), &r)));

        let shape = vec![2, 3, 5];
        let bev = rand_tensor(&mut rng, shape.clone(), 2.0);
        let params: Vec<CondNormParams<f64>> = [CondSource::Semantic, CondSource::EgoMotion, CondSource::AgentMotion]
            .into_iter()
            .map(|source| CondNormParams {
                gamma: rand_tensor(&mut rng, shape.clone(), 1.5),
                beta: rand_tensor(&mut rng, shape.clone(), 1.0),
                source,
            })
            .collect();
        let r = rand_tensor(&mut rng, shape.clone(), 1.0);
        let g = ok(conditional_normalize_backward(&bev, &params, &r))?;
        let cn = |b: &Tensor<f64>, p: &[CondNormParams<f64>]| dot(&conditional_normalize(b, p).unwrap(), &r);
        record("cond-norm input", fd_check(&bev, &g.input, |b| cn(b, &params)));
        for s in 0..params.len() {
            record(
                "cond-norm gamma",
                fd_check(&params[s].gamma, &g.gammas[s], |t| {
                    let mut p = params.clone();
                    p[s].gamma = t.clone();
                    cn(&bev, &p)
                }),
            );
            record(
                "cond-norm beta",
                fd_check(&params[s].beta, &g.betas[s], |t| {
                    let mut p = params.clone();
                    p[s].beta = t.clone();
                    cn(&bev, &p)
                }),
            );
        }

        let map = rand_tensor(&mut rng, vec![4, 5, 3], 1.0);
        let pts: Vec<[f64; 2]> = (0..7).map(|_| [rng.gen_range(-0.8..4.2), rng.gen_range(-0.8..5.2)]).collect();
        let r = rand_tensor(&mut rng, vec![7, 3], 1.0);
        let g = ok(bilinear_sample_2d_backward(map.shape(), &pts, &r))?;
        record("bilinear", fd_check(&map, &g, |m| dot(&bilinear_sample_2d(m, &pts).unwrap(), &r)));

        let lin = Linear::<f64>::seeded(4, 3, 40 + seed);
        let x = rand_tensor(&mut rng, vec![5, 4], 1.0);
        let r = rand_tensor(&mut rng, vec![5, 3], 1.0);
        let g = ok(lin.backward(&x, &r))?;
        record("linear input", fd_check(&x, &g.input, |x| dot(&lin.forward(x).unwrap(), &r)));
        record(
            "linear weight",
            fd_check(&lin.weight, &g.weight, |w| {
                let l = Linear::new(w.clone(), lin.bias.clone()).unwrap();
                dot(&l.forward(&x).unwrap(), &r)
            }),
        );
        record(
            "linear bias",
            fd_check(&lin.bias, &g.bias, |b| {
                let l = Linear::new(lin.weight.clone(), b.clone()).unwrap();
                dot(&l.forward(&x).unwrap(), &r)
            }),
        );

        let logits = rand_tensor(&mut rng, vec![6, 5], 3.0);
        let targets: Vec<u8> = (0..6).map(|_| rng.gen_range(0..5u8)).collect();
        let (_, g) = ok(cross_entropy(&logits, &targets))?;
        record("cross-entropy", fd_check(&logits, &g, |l| cross_entropy(l, &targets).unwrap().0));
        let (_, g) = ok(bce_occupancy(&logits, &targets))?;
        record("bce", fd_check(&logits, &g, |l| bce_occupancy(l, &targets).unwrap().0));

        let target: Vec<f32> = (0..12).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        let pred = Tensor::new(
            vec![4, 3],
            target
                .iter()
                .map(|&t| t as f64 + rng.gen_range(0.05..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect(),
        )
        .unwrap();
        let mask: Vec<bool> = (0..4).map(|i| i == 0 || rng.gen_bool(0.6)).collect();
        let (_, g) = ok(l1_masked(&pred, &target, &mask))?;
        record("l1", fd_check(&pred, &g, |p| l1_masked(p, &target, &mask).unwrap().0));

        let grid = GridConfig::new((-8.0, 8.0), (-8.0, 8.0), (-1.0, 1.0), 0.5).unwrap();
        let obstacles = vec![SemanticGrid::free(grid); 3];
        let expert = Trajectory::new(vec![[1.0, 0.0], [2.0, 0.1], [3.0, 0.3]], 0.5).unwrap();
        let fin = Trajectory::new(vec![[1.1, 0.0], [2.0, 0.3], [2.8, 0.2]], 0.5).unwrap();
        let mut costs: Vec<f64> = (0..6).map(|_| rng.gen_range(1.0..5.0)).collect();
        let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
        // keep the argmin unique and the hinge away from its kink
        for c in costs.iter_mut().filter(|c| **c != min) {
            *c = c.max(min + 0.05);
        }
        let gap = rng.gen_range(0.05..1.0) * if seed % 2 == 0 { 1.0 } else { -1.0 };
        let expert_cost = min + gap;
        let pl = ok(plan_loss(&costs, expert_cost, &expert, &fin, &obstacles, (4.0, 1.8)))?;
        let mut x = costs.clone();
        x.push(expert_cost);
        let mut an = pl.grad_candidate_costs.clone();
        an.push(pl.grad_expert_cost);
        let xt = Tensor::new(vec![x.len()], x).unwrap();
        let at = Tensor::new(vec![an.len()], an).unwrap();
        record(
            "plan-loss margin",
            fd_check(&xt, &at, |v| {
                let d = v.data();
                plan_loss(&d[..d.len() - 1], d[d.len() - 1], &expert, &fin, &obstacles, (4.0, 1.8))
                    .unwrap()
                    .value
            }),
        );
    }
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(max < 1e-3, || format!("max relative error {max:.3e}: {detail}"))?;
    Ok(format!("10 cases each, max rel err {max:.2e}"))
}

// ---------------------------------------------------------------- cond-norm identity

fn bits_equal<T: occplan_core::scalar::Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_f64().unwrap().to_bits() == y.to_f64().unwrap().to_bits())
}

fn c5_condnorm_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5000);
    for shape in [vec![2, 3, 4], vec![32, 32, 16]] {
        let bev = rand_tensor(&mut rng, shape.clone(), 3.0);
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let id: Vec<CondNormParams<f64>> = [CondSource::Semantic, CondSource::EgoMotion, CondSource::AgentMotion]
            .into_iter()
            .map(|s| CondNormParams::identity(h, w, c, s))
            .collect();
        let got = ok(conditional_normalize(&bev, &id))?;
        ensure(bits_equal(&got, &layer_norm_noaffine(&bev)), || format!("f64 {shape:?} not bitwise LN"))?;
        let b32: Tensor<f32> = bev.cast();
        let id32: Vec<CondNormParams<f32>> = [CondSource::Semantic, CondSource::EgoMotion, CondSource::AgentMotion]
            .into_iter()
            .map(|s| CondNormParams::identity(h, w, c, s))
            .collect();
        let got = ok(conditional_normalize(&b32, &id32))?;
        ensure(bits_equal(&got, &layer_norm_noaffine(&b32)), || format!("f32 {shape:?} not bitwise LN"))?;
    }

    let dcfg = WorldDecoderConfig::default();
    let grid = GridConfig::desk();
    let (h, w, d) = grid.dims();
    let c = dcfg.channels;
    let mut worst = 0.0f64;
    for seed in 0..3u64 {
        let gens = MemoryParams::<f64>::identity(c, d, dcfg.categories, seed);
        let e = BevEmbedding {
            t: 0,
            features: rand_tensor(&mut rng, vec![h, w, c], 2.0),
            ego_pose_world: EgoPose::identity(),
        };
        let ctx = PushContext {
            ego_transform: EgoPose::new(0.2, 1.5, -0.5),
            flow: rand_tensor(&mut rng, vec![h, w, d, 3], 2.0),
        };
        let q = ok(memory_push(&ok(MemoryQueue::new(3))?, e.clone(), &ctx, &gens))?;
        let diff = ok(q.entries()[0].features.max_abs_diff(&layer_norm_noaffine(&e.features)))?;
        worst = worst.max(diff);
    }
    ensure(worst <= 1e-6, || format!("memory_push deviates from LN by {worst:.3e}"))?;
    Ok(format!("bitwise LN; memory_push max diff {worst:.1e}"))
}

// ---------------------------------------------------------------- decoder structure

fn desk_memory<T: occplan_core::scalar::Scalar>(dec: &WorldDecoder<T>, seed: u64) -> MemoryQueue<T> {
    let scn = generate_random_scenario(seed, Difficulty::Dense);
    let frames: Vec<_> = (0..dec.config.memory_capacity)
        .map(|t| rasterize_frame(&scn, t, &scn.ego0, &dec.grid).unwrap())
        .collect();
    warm_up(&frames, dec).unwrap()
}

fn c6_decoder_structure() -> Outcome {
    let grid = GridConfig::desk();
    let mut dec = ok(WorldDecoder::<f64>::seeded(WorldDecoderConfig::default(), grid))?;
    let q = desk_memory(&dec, 11);

    let mut zero = dec.clone();
    zero.zero_output_projections();
    let e = ok(decode_next(&q, &[ActionCondition::Velocity { vx: 2.0, vy: 0.3 }], &zero))?;
    let want = ok(zero.queries.clone().reshape(zero.bev_shape()))?;
    ensure(e.features == want, || "zero-projection decoder changed the queries".into())?;

    let horizon = dec.config.horizon;
    let acts: Vec<Vec<ActionCondition>> = (0..horizon)
        .map(|k| vec![ActionCondition::TrajectoryStep { dx: 1.0 + 0.1 * k as f64, dy: 0.05 * k as f64 }])
        .collect();
    let before = q.clone();
    let base = ok(rollout_forecast(&q, &acts, &dec))?;
    ensure(q == before, || "rollout mutated the input memory".into())?;
    for k in 0..horizon {
        let mut other = acts.clone();
        other[k] = vec![ActionCondition::Velocity { vx: -2.0, vy: 1.5 }];
        let r = ok(rollout_forecast(&q, &other, &dec))?;
        ensure(base.logits[..k] == r.logits[..k] && base.flows[..k] == r.flows[..k], || {
            format!("changing action {k} altered earlier steps")
        })?;
        ensure(base.logits[k] != r.logits[k], || format!("changing action {k} had no effect at step {k}"))?;
    }

    dec.config.seed ^= 0x77;
    let dec = ok(WorldDecoder::<f64>::seeded(dec.config.clone(), grid))?;
    let q = desk_memory(&dec, 12);
    let a = ok(decode_next(&q, &[ActionCondition::Velocity { vx: 1.0, vy: 0.0 }], &dec))?;
    let b = ok(decode_next(&q, &[ActionCondition::Velocity { vx: 3.0, vy: -0.5 }], &dec))?;
    let gap = ok(a.features.max_abs_diff(&b.features))?;
    ensure(gap > 1e-6, || format!("velocity gap {gap:.3e}"))?;
    Ok(format!("identity exact, causality bitwise over {horizon} steps, velocity gap {gap:.2e}"))
}

// ---------------------------------------------------------------- planner safety

fn breakdown(total: f64, collides: bool) -> CostBreakdown {
    CostBreakdown {
        agent: total,
        road: 0.0,
        volume: 0.0,
        total,
        hard_collision: vec![false, collides, false],
    }
}

fn c7_planner_safety() -> Outcome {
    let start = Instant::now();
    let cfg = PlannerConfig::default();
    let grid = GridConfig::desk();
    let mut indicators = Vec::new();
    let mut steps = 0usize;
    for seed in 0..100u64 {
        let scn = generate_random_scenario(seed, Difficulty::Corridor);
        let h = scn.horizon;
        let mut w = ok(OracleWorld::new(scn, grid))?;
        let r = ok(closed_loop_rollout::<f64, _>(&mut w, &vec![Command::Forward; h], None, &cfg))?;
        ensure(r.ground_truth.len() == h, || format!("seed {seed}: missing ground truth"))?;
        for s in &r.steps {
            ensure(command_allows(s.command, s.selected_params.1, cfg.kappa_straight), || {
                format!("seed {seed} t {}: curvature {} violates {:?}", s.t, s.selected_params.1, s.command)
            })?;
        }
        // executed pose is the origin of each ground-truth frame
        let here = Trajectory::new(vec![[0.0, 0.0]; h], cfg.dt).unwrap();
        let gts: Vec<SemanticGrid> = r.ground_truth.iter().map(|g| g.semantic.clone()).collect();
        indicators.push(ok(collision_indicators(&here, &gts, cfg.footprint))?);
        steps += h;
    }
    let cr = ok(collision_rate_from_indicators(&indicators, CrVariant::Cumulative))?;
    ensure(cr.iter().all(|&v| v == 0.0), || format!("cumulative CR {cr:?}"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("runtime {secs:.2} s"))?;

    let costs = vec![breakdown(1.0, true), breakdown(2.0, false), breakdown(0.5, true), breakdown(3.0, false)];
    let i = ok(select_index(&costs))?;
    ensure(i == 1, || format!("hard exclusion picked {i}, want 1"))?;
    let all = vec![breakdown(1.0, true), breakdown(0.5, true), breakdown(0.5, true)];
    let i = ok(select_index(&all))?;
    ensure(i == 1, || format!("all-colliding fallback picked {i}, want 1"))?;

    let mut blocked = SemanticGrid::free(grid);
    for i in 0..grid.h() {
        for j in 0..grid.w() {
            let c = grid.cell_center(i as i64, j as i64);
            if (6.0..8.0).contains(&c[0]) && c[1].abs() < 2.0 {
                blocked.set([i, j, grid.ground_layer() + 1], category::VEHICLE);
            }
        }
    }
    let future = vec![blocked.clone(); cfg.horizon];
    let sel = ok(select_trajectory::<f64>(&ok(cfg.sample(Command::Forward))?, &future, None, &cfg))?;
    ensure(sel.costs.iter().any(|c| c.collides()), || "blocked scene has no colliding candidate".into())?;
    ensure(!sel.costs[sel.index].collides(), || "selected a colliding candidate".into())?;
    let best_free = sel
        .costs
        .iter()
        .filter(|c| !c.collides())
        .map(|c| c.total)
        .fold(f64::INFINITY, f64::min);
    ensure(sel.costs[sel.index].total == best_free, || "selection is not the cheapest free candidate".into())?;

    let g = GridConfig::new((-8.0, 8.0), (-8.0, 8.0), (-1.0, 1.0), 0.5).unwrap();
    let obs = vec![SemanticGrid::free(g); 2];
    let t = Trajectory::new(vec![[1.0, 0.0], [2.0, 0.0]], 0.5).unwrap();
    for expert_cost in [1.0, 1.5] {
        let pl = ok(plan_loss(&[2.0, 1.5, 3.0], expert_cost, &t, &t, &obs, (4.0, 1.8)))?;
        ensure(pl.margin == 0.0 && pl.value == 0.0, || format!("hinge at expert cost {expert_cost}: {pl:?}"))?;
        ensure(pl.grad_expert_cost == 0.0 && pl.grad_candidate_costs.iter().all(|&g| g == 0.0), || {
            format!("nonzero hinge gradient at expert cost {expert_cost}")
        })?;
    }
    let pl = ok(plan_loss(&[2.0, 1.5, 3.0], 5.0, &t, &t, &obs, (4.0, 1.8)))?;
    ensure(pl.margin == 3.5 && pl.value == 3.5, || format!("positive hinge: {pl:?}"))?;
    ensure(pl.grad_expert_cost == 1.0 && pl.grad_candidate_costs == vec![0.0, -1.0, 0.0], || {
        format!("positive hinge gradient: {:?} {}", pl.grad_candidate_costs, pl.grad_expert_cost)
    })?;
    Ok(format!("100 scenarios, {steps} steps, CR 0, {secs:.2} s; exclusion and hinge exact"))
}

// ---------------------------------------------------------------- determinism

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

fn run_outputs(dir: &Path) -> Vec<(String, Vec<(String, Vec<u8>)>)> {
    vec![
        ("pred".into(), dir_bytes(&dir.join("pred"))),
        ("gt".into(), dir_bytes(&dir.join("gt"))),
        ("plan".into(), vec![("plan.jsonl".into(), std::fs::read(dir.join("plan.jsonl")).unwrap())]),
    ]
}

fn c8_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut frames = 0;
    for world in [WorldKind::Oracle, WorldKind::Neural] {
        let args = RolloutArgs {
            scenario: generate_random_scenario(21, Difficulty::Corridor),
            scenario_path: None,
            world,
            actions: ActionSource::Planner,
            horizon: Some(4),
            seed: 9,
            config: EngineConfig::default(),
            checkpoint: None,
        };
        let first = tmp.path().join(format!("{}-0", world.name()));
        let manifest = ok(cmd_rollout(&args, &first))?;
        let a = tmp.path().join(format!("{}-a", world.name()));
        let b = tmp.path().join(format!("{}-b", world.name()));
        ok(cmd_rollout_manifest(&manifest, &a))?;
        ok(cmd_rollout_manifest(&manifest, &b))?;
        let (o0, oa, ob) = (run_outputs(&first), run_outputs(&a), run_outputs(&b));
        ensure(oa == ob, || format!("{} manifest replays differ", world.name()))?;
        ensure(o0 == oa, || format!("{} replay differs from the original run", world.name()))?;
        frames += oa[0].1.len();
    }
    Ok(format!("oracle and neural replays byte-identical ({frames} predicted frames)"))
}

// ---------------------------------------------------------------- speed

fn c9_speed() -> Outcome {
    let grid = GridConfig::desk();
    ensure(grid.dims() == (32, 32, 8), || format!("desk grid {:?}", grid.dims()))?;
    let cfg = WorldDecoderConfig::default();
    ensure(cfg.num_layers == 3 && cfg.memory_capacity == 3 && cfg.horizon == 4, || format!("{cfg:?}"))?;
    let dec = ok(WorldDecoder::<f32>::seeded(cfg, grid))?;
    let scn = generate_random_scenario(3, Difficulty::Dense);
    let frames: Vec<_> = (0..3).map(|t| rasterize_frame(&scn, t, &scn.ego0, &grid).unwrap()).collect();
    let acts = vec![vec![ActionCondition::Velocity { vx: 2.0, vy: 0.0 }]; 4];
    let start = Instant::now();
    let q = ok(warm_up(&frames, &dec))?;
    let r = ok(rollout_forecast(&q, &acts, &dec))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(r.frames.len() == 4, || "short rollout".into())?;
    ensure(secs < 2.0, || format!("{secs:.3} s"))?;
    Ok(format!("warm-up + 4-step rollout in {secs:.3} s"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("C1 metric oracle suite", c1_metric_oracles),
        ("C2 VPQ oracle round trip", c2_vpq_round_trip),
        ("C3 weighted mIoU arithmetic", c3_weighted_miou),
        ("C4 gradient suite", c4_gradients),
        ("C5 cond-norm identity", c5_condnorm_identity),
        ("C6 decoder structure", c6_decoder_structure),
        ("C7 planner safety", c7_planner_safety),
        ("C8 determinism", c8_determinism),
        ("C9 speed", c9_speed),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let res = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match res {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
