mod common;

use common::dijkstra_to;
use emvlab::network::{generate_grid, TrafficNetwork};
use emvlab::routing::{
    emv_next_hop, prepopulate, update_step, update_step_counted, LinkTimeField, RoutingTable,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_case(seed: u64) -> (TrafficNetwork, Vec<f64>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
    let net = generate_grid(r, c, 200.0, 1, 0.0).unwrap();
    let times = (0..net.link_count()).map(|_| rng.gen_range(1.0..100.0)).collect();
    let dest = rng.gen_range(0..net.node_count());
    (net, times, dest)
}

fn assert_matches_oracle(net: &TrafficNetwork, t: &RoutingTable, times: &[f64]) {
    let want = dijkstra_to(net, times, t.dest);
    assert_eq!(t.eta, want);
    for i in 0..net.node_count() {
        match t.next[i] {
            None => assert!(i == t.dest || want[i].is_infinite()),
            Some(j) => {
                let l = net.link_between(i, j).unwrap();
                assert_eq!(times[l] + want[j], want[i], "Next of {i} is not on a shortest path");
            }
        }
    }
}

/// Sweeps until a fixed point; `None` if none within `limit`.
fn sweeps_to_fixed_point(
    net: &TrafficNetwork,
    mut t: RoutingTable,
    field: &LinkTimeField,
    limit: usize,
) -> Option<(RoutingTable, usize)> {
    for k in 1..=limit {
        let nt = update_step(net, &t, field);
        if nt.same_solution(&t) {
            return Some((nt, k - 1));
        }
        t = nt;
    }
    None
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prepopulate_equals_dijkstra(seed in any::<u64>()) {
        let (net, times, dest) = random_case(seed);
        let t = prepopulate(&net, &LinkTimeField::new(times.clone()).unwrap(), dest);
        assert_matches_oracle(&net, &t, &times);
    }

    #[test]
    fn fixed_point_satisfies_bellman(seed in any::<u64>()) {
        let (net, times, dest) = random_case(seed);
        let field = LinkTimeField::new(times.clone()).unwrap();
        let t = prepopulate(&net, &field, dest);
        for (l, link) in net.links.iter().enumerate() {
            prop_assert!(t.eta[link.from] <= times[l] + t.eta[link.to]);
        }
        for i in 0..net.node_count() {
            if let Some(j) = t.next[i] {
                let l = net.link_between(i, j).unwrap();
                prop_assert_eq!(t.eta[i], times[l] + t.eta[j]);
            }
        }
        prop_assert!(update_step(&net, &t, &field).same_solution(&t));
    }

    #[test]
    fn sweeps_from_scratch_reach_dijkstra(seed in any::<u64>()) {
        let (net, times, dest) = random_case(seed);
        let field = LinkTimeField::new(times.clone()).unwrap();
        let start = RoutingTable::unpopulated(net.node_count(), dest);
        let (t, k) = sweeps_to_fixed_point(&net, start, &field, net.node_count() + 1).unwrap();
        prop_assert!(k <= net.node_count() - 1);
        prop_assert!(t.same_solution(&prepopulate(&net, &field, dest)));
    }

    #[test]
    fn perturbed_times_reconverge(seed in any::<u64>(), k in 1usize..=3) {
        let (net, mut times, dest) = random_case(seed);
        let field = LinkTimeField::new(times.clone()).unwrap();
        let table = prepopulate(&net, &field, dest);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for _ in 0..k {
            let l = rng.gen_range(0..net.link_count());
            times[l] = rng.gen_range(1.0..100.0);
        }
        let field = LinkTimeField::new(times.clone()).unwrap();
        let n = net.node_count();
        let (t, sweeps) = sweeps_to_fixed_point(&net, table, &field, n + 1)
            .expect("no fixed point within |V| sweeps");
        prop_assert!(sweeps <= n);
        assert_matches_oracle(&net, &t, &times);
    }

    #[test]
    fn sweep_touches_each_link_once(seed in any::<u64>()) {
        let (net, times, dest) = random_case(seed);
        let field = LinkTimeField::new(times).unwrap();
        let t = prepopulate(&net, &field, dest);
        let (_, touched) = update_step_counted(&net, &t, &field);
        prop_assert_eq!(touched, net.link_count() - net.out_links[dest].len());
    }

    #[test]
    fn next_hops_walk_to_the_destination(seed in any::<u64>()) {
        let (net, times, dest) = random_case(seed);
        let t = prepopulate(&net, &LinkTimeField::new(times).unwrap(), dest);
        for i in 0..net.node_count() {
            let path = t.path_from(i).unwrap();
            prop_assert_eq!(*path.last().unwrap(), dest);
            prop_assert_eq!(emv_next_hop(&t, i).unwrap(), path.get(1).copied());
        }
    }
}
