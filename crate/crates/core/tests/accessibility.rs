mod common;

use common::access::{bellman_ford, random_graph, raster_population, star};
use emvlab::accessibility::{
    adjusted_times, assign_population, coverage_curve, edge_delay, intersection_density,
    multi_source_dijkstra, run_access, vulnerability_report, AccessEdge, AccessGraph, AccessNode,
    AccessParams, Facility, FacilityKind, Tract, DENSITY_RADIUS_M,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn node(id: &str, x: f64, y: f64, signalized: bool) -> AccessNode {
    AccessNode { id: id.into(), x, y, signalized }
}

fn plain_costs(g: &AccessGraph) -> Vec<f64> {
    g.edges.iter().map(|e| e.length / e.speed).collect()
}

#[test]
fn density_examples() {
    let mut nodes = vec![node("c", 0.0, 0.0, false)];
    for (i, (x, y)) in [(800.0, 0.0), (0.0, -800.0), (300.0, 400.0), (-500.0, 0.0), (0.0, 10.0)]
        .into_iter()
        .enumerate()
    {
        nodes.push(node(&format!("s{i}"), x, y, true));
    }
    nodes.push(node("far", 801.0, 0.0, true));
    nodes.push(node("unsig", 1.0, 1.0, false));
    let g = AccessGraph::new(nodes, vec![], vec![]).unwrap();
    let d = intersection_density(&g, 800.0);
    let want = 5.0 / (std::f64::consts::PI * 800.0 * 800.0);
    assert!((d[0] - want).abs() < 1e-18);
    assert!((want - 2.487e-6).abs() < 1e-9);
    assert!((edge_delay(want, want, 15.0) - 3.73e-5).abs() < 1e-7);
}

#[test]
fn line_at_default_speed() {
    let mph25 = 25.0 * 0.44704;
    let g = AccessGraph::new(
        vec![node("a", 0.0, 0.0, false), node("b", 500.0, 0.0, false), node("c", 1000.0, 0.0, false)],
        vec![
            AccessEdge { u: 0, v: 1, length: 500.0, speed: mph25 },
            AccessEdge { u: 1, v: 2, length: 500.0, speed: mph25 },
        ],
        vec![Facility { node: 0, kind: FacilityKind::Ems }],
    )
    .unwrap();
    let t = adjusted_times(&g, 0.0, FacilityKind::Ems).unwrap();
    assert_eq!(t[0], 0.0);
    assert!((t[2] - 89.477).abs() < 1e-3);
    assert!(adjusted_times(&g, 0.0, FacilityKind::Hospital).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn multi_source_equals_per_facility_minimum(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 2..6);
        let cost: Vec<f64> = g.edges.iter().map(|e| e.length / e.speed * rng.gen_range(1.0..2.0)).collect();
        let k = rng.gen_range(1..=3);
        let sources: Vec<usize> = (0..k).map(|_| rng.gen_range(0..g.nodes.len())).collect();
        for reverse in [false, true] {
            let got = multi_source_dijkstra(&g, &cost, &sources, reverse);
            for v in 0..g.nodes.len() {
                let want = sources
                    .iter()
                    .map(|&s| bellman_ford(&g, &cost, s, reverse)[v])
                    .fold(f64::INFINITY, f64::min);
                prop_assert!(got[v] == want || (got[v] - want).abs() < 1e-9 * want);
            }
        }
    }

    #[test]
    fn adjusted_times_nondecreasing_in_alpha(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 2..6);
        for kind in FacilityKind::ALL {
            let plain = plain_costs(&g);
            let sources: Vec<usize> = g.facilities.iter().filter(|f| f.kind == kind).map(|f| f.node).collect();
            let base = multi_source_dijkstra(&g, &plain, &sources, kind == FacilityKind::Hospital);
            let mut prev = adjusted_times(&g, 0.0, kind).unwrap();
            prop_assert_eq!(&prev, &base);
            for alpha in [5.0, 10.0, 15.0] {
                let t = adjusted_times(&g, alpha, kind).unwrap();
                for (a, b) in prev.iter().zip(&t) {
                    prop_assert!(b >= a);
                }
                prev = t;
            }
        }
    }

    #[test]
    fn coverage_is_monotone_and_complete(
        times in prop::collection::vec(0.0f64..1000.0, 1..40),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pop: Vec<f64> = times.iter().map(|_| rng.gen_range(0.0..50.0) + 0.01).collect();
        let taus: Vec<f64> = (0..=20).map(|i| i as f64 * 60.0).chain([f64::INFINITY]).collect();
        let c = coverage_curve(&times, &pop, &taus).unwrap();
        prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(c.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert_eq!(*c.last().unwrap(), 1.0);
    }

}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Voronoi assignment against a fine raster; totals within 0.1%.
    #[test]
    fn voronoi_population_matches_raster(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, 2..5);
        let mut tracts = vec![Tract::new(
            vec![(-100.0, -100.0), (400.0, -100.0), (400.0, 350.0), (-100.0, 350.0)],
            rng.gen_range(100.0..2000.0),
            None,
        ).unwrap()];
        tracts.push(Tract::new(star(&mut rng, (500.0, 500.0), 300.0, 9), rng.gen_range(100.0..2000.0), None).unwrap());
        let exact = assign_population(&g, &tracts).unwrap();
        let raster = raster_population(&g, &tracts, 1500);
        let total: f64 = tracts.iter().map(|t| t.population).sum();
        let sum: f64 = exact.iter().sum();
        let rsum: f64 = raster.iter().sum();
        prop_assert!((sum - total).abs() <= 1e-3 * total, "{sum} vs {total}");
        prop_assert!((sum - rsum).abs() <= 1e-3 * total, "{sum} vs raster {rsum}");
        for (a, b) in exact.iter().zip(&raster) {
            prop_assert!((a - b).abs() <= 5e-3 * total, "node {a} vs raster {b}");
        }
    }
}

#[test]
fn population_examples() {
    let square = vec![(0.0, 0.0), (100.0, 0.0), (100.0, 100.0), (0.0, 100.0)];
    let one = AccessGraph::new(vec![node("a", 30.0, 70.0, false)], vec![], vec![]).unwrap();
    let t = Tract::new(square.clone(), 100.0, None).unwrap();
    assert!((assign_population(&one, &[t.clone()]).unwrap()[0] - 100.0).abs() < 1e-9);
    let two = AccessGraph::new(
        vec![node("a", 25.0, 50.0, false), node("b", 75.0, 50.0, false)],
        vec![],
        vec![],
    )
    .unwrap();
    let p = assign_population(&two, &[t.clone()]).unwrap();
    assert!((p[0] - 50.0).abs() < 1e-9 && (p[1] - 50.0).abs() < 1e-9);
    let dup = AccessGraph::new(
        vec![node("a", 25.0, 50.0, false), node("b", 25.0, 50.0, false)],
        vec![],
        vec![],
    )
    .unwrap();
    assert!(assign_population(&dup, &[t]).is_err());
}

#[test]
fn vulnerability_matches_hand_dijkstra() {
    // 4×4 grid at 400 m, 10 m/s both ways, EMS in the corner: node (r, c)
    // is 40 (r + c) s away.
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for r in 0..4 {
        for c in 0..4 {
            nodes.push(node(&format!("r{r}c{c}"), c as f64 * 400.0, r as f64 * 400.0, false));
        }
    }
    for i in 0..16 {
        for j in [i + 1, i + 4] {
            if j < 16 && (j != i + 1 || i % 4 != 3) {
                edges.push(AccessEdge { u: i, v: j, length: 400.0, speed: 10.0 });
                edges.push(AccessEdge { u: j, v: i, length: 400.0, speed: 10.0 });
            }
        }
    }
    let g = AccessGraph::new(nodes, edges, vec![Facility { node: 0, kind: FacilityKind::Ems }]).unwrap();
    let t = adjusted_times(&g, 0.0, FacilityKind::Ems).unwrap();
    for i in 0..16 {
        assert!((t[i] - 40.0 * ((i / 4) + (i % 4)) as f64).abs() < 1e-9);
    }
    let pop = vec![10.0; 16];
    let rep = vulnerability_report(&g, &t, &pop, 150.0);
    let flagged: Vec<usize> = rep.rows.iter().map(|r| r.node).collect();
    assert_eq!(flagged, vec![7, 10, 11, 13, 14, 15]);
    assert_eq!(rep.underserved, 60.0);
    assert_eq!(rep.components.len(), 1);
    assert!(vulnerability_report(&g, &t, &pop, 1e9).rows.is_empty());
}

#[test]
fn toy_directory_runs() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/access_toy");
    let (g, res) = run_access(&dir, &AccessParams::new(15.0, 240.0)).unwrap();
    assert!(res.from_tracts);
    let total: f64 = res.population.iter().sum();
    assert!((total - 2000.0).abs() < 2.0);
    for cov in &res.coverage {
        assert!(cov.windows(2).all(|w| w[0] <= w[1]));
    }
    assert!(g.nodes.len() == 25 && DENSITY_RADIUS_M == 800.0);
}
