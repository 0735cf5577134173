mod common;

use common::{fig2, FIG2_CAPACITY};
use emvlab::network::{generate_grid, LinkRecord, NetworkFile, NodeRecord, TrafficNetwork};
use emvlab::pressure::{
    intersection_pressure_emvlight, intersection_pressure_sum, lane_pressure, phase_pressure,
    presslight_intersection_pressure, presslight_movement_pressure, PressureSnapshot,
};
use proptest::prelude::*;

const TOL: f64 = 1e-12;

#[test]
fn worked_lane_and_movement_values() {
    let f = fig2();
    let w2 = lane_pressure(&f.net, f.node, f.lane2, &f.snap).unwrap();
    assert!((w2 - 2.0 / 5.0).abs() < TOL, "{w2}");
    let m = presslight_movement_pressure(f.lane2, f.lane4, &f.snap);
    assert!((m + 1.0 / 5.0).abs() < TOL, "{m}");
}

#[test]
fn worked_intersection_values() {
    let f = fig2();
    let p = intersection_pressure_emvlight(&f.net, f.node, &f.snap).unwrap();
    assert!((p - 25.0 / 80.0).abs() < TOL, "{p}");
    let ps = presslight_intersection_pressure(&f.net, f.node, &f.snap);
    assert!((ps - 6.0).abs() < TOL, "{ps}");
}

#[test]
fn worked_intersection_has_24_lane_to_link_movements() {
    let f = fig2();
    let ix = &f.net.intersections[f.node];
    assert_eq!(ix.movements.len(), 24);
    let mut degrees: Vec<usize> = ix
        .incoming_lanes
        .iter()
        .map(|&l| ix.lane_movements(l).count())
        .collect();
    degrees.sort();
    assert_eq!(degrees, vec![2, 2, 2, 2, 4, 4, 4, 4]);
}

/// a <-> b <-> c with one lane per link.
fn line() -> TrafficNetwork {
    let node = |id: &str, x: f64| NodeRecord {
        id: id.into(),
        x_m: x,
        y_m: 0.0,
    };
    let link = |a: &str, b: &str| LinkRecord {
        id: format!("{a}{b}"),
        from: a.into(),
        to: b.into(),
        length_m: 100.0,
        lanes: 1,
        k: None,
        c_ec: 0.0,
        v_free_mps: 6.0,
        v_emv_mps: 12.0,
    };
    TrafficNetwork::from_file(NetworkFile {
        nodes: vec![node("a", 0.0), node("b", 100.0), node("c", 200.0)],
        links: vec![link("a", "b"), link("b", "a"), link("b", "c"), link("c", "b")],
        phases: None,
        right_on_any_phase: false,
    })
    .unwrap()
}

fn line_snap(net: &TrafficNetwork, d: [(&str, f64); 4]) -> PressureSnapshot {
    let mut v = vec![0.0; net.lanes.len()];
    for (name, x) in d {
        v[net.links[net.link_by_name(name).unwrap()].lane_ids.start] = x;
    }
    PressureSnapshot::from_densities(v)
}

#[test]
fn intersection_average_of_two_lanes() {
    let net = line();
    let b = net.node_by_name("b").unwrap();
    let snap = line_snap(&net, [("ab", 0.5), ("bc", 0.3), ("cb", 0.4), ("ba", 0.0)]);
    let p = intersection_pressure_emvlight(&net, b, &snap).unwrap();
    assert!((p - 0.3).abs() < TOL, "{p}");
    let s = intersection_pressure_sum(&net, b, &snap).unwrap();
    assert!((s - 0.6).abs() < TOL, "{s}");
}

#[test]
fn presslight_sum_of_two_movements() {
    let net = line();
    let b = net.node_by_name("b").unwrap();
    let snap = line_snap(&net, [("ab", 0.5), ("bc", 0.2), ("cb", 0.1), ("ba", 0.6)]);
    let p = presslight_intersection_pressure(&net, b, &snap);
    assert!((p - 0.2).abs() < TOL, "{p}");
}

#[test]
fn phase_pressure_sums_permitted_movements() {
    let f = fig2();
    let ix = &f.net.intersections[f.node];
    for phase in 0..ix.phases.len() {
        let want: f64 = ix.phases[phase]
            .movements
            .iter()
            .map(|&m| {
                let mv = &ix.movements[m];
                f.snap.density(mv.in_lane) - f.snap.density(mv.out_lane)
            })
            .sum();
        let got = phase_pressure(&f.net, f.node, phase, &f.snap).unwrap();
        assert!((got - want).abs() < TOL);
    }
    for phase in ix.empty_phases() {
        assert_eq!(phase_pressure(&f.net, f.node, phase, &f.snap).unwrap(), 0.0);
    }
}

/// Lane pressure from raw counts in tenths of a vehicle-density unit:
/// with capacity 5 and two-lane out-links, `10 w(l) = |2 x(l) - Σ x(m)|`.
fn oracle_tenths(net: &TrafficNetwork, node: usize, counts: &[usize], lane: usize) -> i64 {
    let ix = &net.intersections[node];
    let down: i64 = ix.lane_movements(lane).map(|m| counts[m.out_lane] as i64).sum();
    (2 * counts[lane] as i64 - down).abs()
}

fn interior_counts() -> impl Strategy<Value = Vec<usize>> {
    let lanes = generate_grid(3, 3, 200.0, 2, 0.0).unwrap().lanes.len();
    proptest::collection::vec(0..=FIG2_CAPACITY, lanes)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn emvlight_pressure_matches_count_oracle(counts in interior_counts()) {
        let f = fig2();
        let snap = PressureSnapshot::from_counts_with_capacity(&counts, &vec![FIG2_CAPACITY; counts.len()]);
        let ix = &f.net.intersections[f.node];
        let tenths: i64 = ix.incoming_lanes.iter().map(|&l| oracle_tenths(&f.net, f.node, &counts, l)).sum();
        let want = tenths as f64 / 10.0 / ix.incoming_lanes.len() as f64;
        let got = intersection_pressure_emvlight(&f.net, f.node, &snap).unwrap();
        prop_assert!((got - want).abs() < TOL, "{} vs {}", got, want);
    }

    #[test]
    fn presslight_pressure_matches_closed_form(counts in interior_counts()) {
        // at a four-arm two-lane node every in-lane reaches 6 out-lanes and
        // every out-lane is reached by 6 in-lanes
        let f = fig2();
        let snap = PressureSnapshot::from_counts_with_capacity(&counts, &vec![FIG2_CAPACITY; counts.len()]);
        let ix = &f.net.intersections[f.node];
        let sin: i64 = ix.incoming_lanes.iter().map(|&l| counts[l] as i64).sum();
        let sout: i64 = ix.outgoing_lanes.iter().map(|&l| counts[l] as i64).sum();
        let want = (6 * (sin - sout)).abs() as f64 / FIG2_CAPACITY as f64;
        let got = presslight_intersection_pressure(&f.net, f.node, &snap);
        prop_assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
    }

    #[test]
    fn pressures_are_bounded_and_homogeneous(
        d in proptest::collection::vec(0.0f64..=1.0, 96),
        c in 0.0f64..=1.0,
    ) {
        let net = generate_grid(3, 3, 200.0, 2, 0.0).unwrap();
        prop_assume!(d.len() >= net.lanes.len());
        let snap = PressureSnapshot::from_densities(d[..net.lanes.len()].to_vec());
        let scaled = snap.scaled(c);
        for v in 0..net.node_count() {
            let ix = &net.intersections[v];
            for &l in &ix.incoming_lanes {
                let w = lane_pressure(&net, v, l, &snap).unwrap();
                prop_assert!(w >= 0.0);
                let ws = lane_pressure(&net, v, l, &scaled).unwrap();
                prop_assert!((ws - c * w).abs() < TOL);
            }
            for m in &ix.movements {
                let p = presslight_movement_pressure(m.in_lane, m.out_lane, &snap);
                prop_assert!((-1.0..=1.0).contains(&p));
            }
            let p = intersection_pressure_emvlight(&net, v, &snap).unwrap();
            let ps = intersection_pressure_emvlight(&net, v, &scaled).unwrap();
            prop_assert!((ps - c * p).abs() < TOL);
            let q = presslight_intersection_pressure(&net, v, &snap);
            let qs = presslight_intersection_pressure(&net, v, &scaled);
            prop_assert!((qs - c * q).abs() < 1e-9);
        }
    }
}
