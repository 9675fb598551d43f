use proptest::prelude::*;

use occplan_core::grid::{
    category, read_dump, write_dump, EgoPose, FlowGrid, GridConfig, InstanceGrid, SemanticGrid,
};
use occplan_core::metrics::{
    collision_rate_from_indicators, l2_noavg, l2_temavg, miou_c, weighted_mean, CrVariant,
};
use occplan_core::planner::Trajectory;
use occplan_core::synthworld::{generate_random_scenario, rasterize_frame, Difficulty};

const CATS: [u8; 4] = [1, 2, 3, 4];

fn small() -> GridConfig {
    GridConfig::new((-3.0, 3.0), (-2.0, 2.0), (0.0, 2.0), 1.0).unwrap()
}

fn labels() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..5, small().len())
}

proptest! {
    #[test]
    fn miou_bounded_symmetric_and_reflexive(a in labels(), b in labels()) {
        let (ga, gb) = (SemanticGrid::new(small(), a).unwrap(), SemanticGrid::new(small(), b).unwrap());
        let ab = miou_c(&ga, &gb, &CATS).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, miou_c(&gb, &ga, &CATS).unwrap());
        prop_assert_eq!(miou_c(&ga, &ga, &CATS).unwrap(), 1.0);
    }

    #[test]
    fn weighted_mean_within_range(v in prop::collection::vec(0.0f64..1.0, 1..8)) {
        let m = weighted_mean(&v);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
    }

    #[test]
    fn weighted_mean_of_constant(c in 0.0f64..1.0, n in 1usize..8) {
        prop_assert!((weighted_mean(&vec![c; n]) - c).abs() < 1e-12);
    }

    #[test]
    fn cumulative_cr_dominates_and_grows(
        ind in (1usize..6).prop_flat_map(|h| prop::collection::vec(prop::collection::vec(any::<bool>(), h), 1..6))
    ) {
        let step = collision_rate_from_indicators(&ind, CrVariant::Stepwise).unwrap();
        let cum = collision_rate_from_indicators(&ind, CrVariant::Cumulative).unwrap();
        for t in 0..cum.len() {
            prop_assert!(cum[t] >= step[t]);
            if t > 0 {
                prop_assert!(cum[t] >= cum[t - 1]);
            }
        }
    }

    #[test]
    fn temavg_is_running_mean_of_noavg(
        pts in prop::collection::vec(((-5.0f64..5.0, -5.0f64..5.0), (-5.0f64..5.0, -5.0f64..5.0)), 1..8)
    ) {
        let a = Trajectory::new(pts.iter().map(|p| [p.0 .0, p.0 .1]).collect(), 0.5).unwrap();
        let b = Trajectory::new(pts.iter().map(|p| [p.1 .0, p.1 .1]).collect(), 0.5).unwrap();
        let no = l2_noavg(&a, &b).unwrap();
        let tem = l2_temavg(&a, &b).unwrap();
        prop_assert!(no.iter().all(|&d| d >= 0.0));
        let mut sum = 0.0;
        for (k, (n, t)) in no.iter().zip(&tem).enumerate() {
            sum += n;
            prop_assert!((sum / (k + 1) as f64 - t).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_inverse_round_trips(yaw in -3.1f64..3.1, x in -20.0f64..20.0, y in -20.0f64..20.0, px in -9.0f64..9.0, py in -9.0f64..9.0) {
        let p = EgoPose::new(yaw, x, y);
        prop_assert!(p.compose(&p.inverse()).approx_eq(&EgoPose::identity(), 1e-9));
        let q = p.inverse().apply(p.apply([px, py]));
        prop_assert!((q[0] - px).abs() < 1e-9 && (q[1] - py).abs() < 1e-9);
    }

    #[test]
    fn dump_round_trips(l in labels(), f in prop::collection::vec(-4.0f32..4.0, 3 * small().len()), ids in prop::collection::vec(0u16..4, small().len())) {
        let s = SemanticGrid::new(small(), l).unwrap();
        let fl = FlowGrid::new(small(), f).unwrap();
        let inst = InstanceGrid::new(small(), ids).unwrap();
        let mut buf = Vec::new();
        write_dump(&mut buf, &s, Some(&fl), Some(&inst)).unwrap();
        let d = read_dump(buf.as_slice()).unwrap();
        prop_assert_eq!(d.semantic, s);
        prop_assert_eq!(d.flow, Some(fl));
        prop_assert_eq!(d.instances, Some(inst));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rasterized_gmo_voxels_carry_ids_and_land_on_their_center(seed in 0u64..500, t in 0usize..5) {
        let scn = generate_random_scenario(seed, Difficulty::Dense);
        let cfg = GridConfig::desk();
        let fr = rasterize_frame(&scn, t, &scn.ego0, &cfg).unwrap();
        let prev = scn.step_agents(t.saturating_sub(1));
        for (v, &label) in fr.semantic.labels().iter().enumerate() {
            let id = fr.instances.ids()[v];
            prop_assert_eq!(category::is_gmo(label), id != 0);
            if id == 0 {
                continue;
            }
            let a = scn.agents.iter().position(|a| a.id == id).unwrap();
            let p = cfg.voxel_to_world(cfg.unindex(v));
            let f = fr.flow.get(v);
            let world = scn.ego0.apply([p[0] + f[0], p[1] + f[1]]);
            // flow is stored as f32
            prop_assert!((world[0] - prev[a].x).abs() < 1e-4 && (world[1] - prev[a].y).abs() < 1e-4);
        }
    }
}
