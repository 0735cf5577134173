#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use emvlab::network::{generate_grid, Arm, LaneId, NodeId, TrafficNetwork};
use emvlab::pressure::PressureSnapshot;

/// Vehicle counts of the worked four-way, two-lane intersection, capacity 5
/// per lane. Indexed by arm (N, E, S, W), then lane (left-turn lane,
/// through/right lane). The South in-lanes are lanes 1 and 2; the East,
/// North and West out-lanes are 3-4, 5-6 and 7-8. Lane 2 (1 vehicle) and
/// out-lanes 3-6 (1, 2, 3, 0) are as printed in the text; the remaining
/// counts are a placement that reproduces both printed intersection
/// pressures (25/80 averaged over in-lanes, 6 for the lane-to-lane sum).
pub const FIG2_IN: [[usize; 2]; 4] = [[1, 2], [1, 2], [0, 1], [1, 2]];
pub const FIG2_OUT: [[usize; 2]; 4] = [[3, 0], [1, 2], [2, 1], [3, 3]];
pub const FIG2_CAPACITY: usize = 5;

pub struct Fig2 {
    pub net: TrafficNetwork,
    pub node: NodeId,
    pub snap: PressureSnapshot,
    pub counts: Vec<usize>,
    pub lane2: LaneId,
    pub lane4: LaneId,
}

fn lanes(net: &TrafficNetwork, link: usize) -> Vec<LaneId> {
    net.links[link].lane_ids.clone().collect()
}

/// Centre of a 3×3 two-lane grid loaded with the worked-example counts.
pub fn fig2() -> Fig2 {
    let net = generate_grid(3, 3, 200.0, 2, 0.0).unwrap();
    let node = net.node_by_name("r1c1").unwrap();
    let ix = &net.intersections[node];
    let mut counts = vec![0usize; net.lanes.len()];
    for arm in Arm::ALL {
        let a = arm.index();
        let inl = lanes(&net, ix.arm_in[a].unwrap());
        let out = lanes(&net, ix.arm_out[a].unwrap());
        for k in 0..2 {
            counts[inl[k]] = FIG2_IN[a][k];
            counts[out[k]] = FIG2_OUT[a][k];
        }
    }
    let capacity = vec![FIG2_CAPACITY; net.lanes.len()];
    let snap = PressureSnapshot::from_counts_with_capacity(&counts, &capacity);
    let south = lanes(&net, ix.arm_in[Arm::South.index()].unwrap());
    let east = lanes(&net, ix.arm_out[Arm::East.index()].unwrap());
    Fig2 {
        node,
        snap,
        counts,
        lane2: south[1],
        lane4: east[1],
        net,
    }
}

/// Textbook Dijkstra over reversed links: travel time from every node to
/// `dest` under per-link `times`.
pub fn dijkstra_to(net: &TrafficNetwork, times: &[f64], dest: NodeId) -> Vec<f64> {
    let n = net.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[dest] = 0.0;
    heap.push(Reverse((Key(0.0), dest)));
    while let Some(Reverse((Key(d), v))) = heap.pop() {
        if done[v] {
            continue;
        }
        done[v] = true;
        for (l, link) in net.links.iter().enumerate() {
            if link.to != v {
                continue;
            }
            let u = link.from;
            let nd = times[l] + d;
            if nd < dist[u] {
                dist[u] = nd;
                heap.push(Reverse((Key(nd), u)));
            }
        }
    }
    dist
}

#[derive(Clone, Copy, PartialEq, PartialOrd)]
struct Key(f64);
impl Eq for Key {}
impl Ord for Key {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&o.0)
    }
}

pub mod grad {
    use emvlab::agents::{policy_loss, value_loss, Sample, Sequence};
    use emvlab::nn::{Arch, Head, Model, NetSpec, ParamSet, RecurrentState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub const LAMBDA: f64 = 0.01;

    /// Full-size LSTM network (110 observation inputs, 32 fingerprint inputs).
    pub fn model(head: Head, seed: u64) -> Model {
        Model::new(NetSpec::new(Arch::Lstm, head), seed)
    }

    /// Two or three sequences of one to four steps with random contents.
    pub fn batch(spec: &NetSpec, rng: &mut ChaCha8Rng) -> Vec<Sequence> {
        let n = rng.gen_range(2..=3);
        (0..n)
            .map(|_| {
                let r = spec.recurrent;
                let init = RecurrentState {
                    h: (0..r).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                    c: (0..r).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                };
                let len = rng.gen_range(1..=4);
                let steps = (0..len)
                    .map(|_| Sample {
                        obs: (0..spec.obs_dim).map(|_| rng.gen_range(0.0..1.0)).collect(),
                        fp: (0..spec.fp_dim).map(|_| rng.gen_range(0.0..1.0)).collect(),
                        action: rng.gen_range(0..spec.actions),
                        ret: rng.gen_range(-2.0..2.0),
                        adv: rng.gen_range(-1.0..1.0),
                    })
                    .collect();
                Sequence { init, steps }
            })
            .collect()
    }

    pub fn loss(model: &Model, seqs: &[Sequence]) -> (f64, ParamSet) {
        match model.spec.head {
            Head::Value => value_loss(model, seqs).unwrap(),
            Head::Policy => policy_loss(model, seqs, LAMBDA).unwrap(),
        }
    }

    fn shifted(model: &Model, dir: &ParamSet, c: f64) -> Model {
        let mut m = model.clone();
        m.params.add_scaled(dir, c);
        m
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
    }

    /// Worst relative error between the analytic gradient and central
    /// differences, over one random direction through every parameter and
    /// `coords` single coordinates (at least one per tensor).
    pub fn max_rel_error(model: &Model, seqs: &[Sequence], coords: usize, rng: &mut ChaCha8Rng) -> f64 {
        let (_, g) = loss(model, seqs);
        let fd = |dir: &ParamSet, eps: f64| {
            let up = loss(&shifted(model, dir, eps), seqs).0;
            let down = loss(&shifted(model, dir, -eps), seqs).0;
            (up - down) / (2.0 * eps)
        };

        let mut dir = g.zeros_like();
        let mut analytic = 0.0;
        for (t, gt) in dir.tensors.iter_mut().zip(&g.tensors) {
            for (d, gv) in t.values.iter_mut().zip(&gt.values) {
                *d = rng.gen_range(-1.0..1.0);
                analytic += *d * gv;
            }
        }
        let mut worst = rel(analytic, fd(&dir, 1e-6));

        let n_tensors = g.tensors.len();
        for k in 0..coords.max(n_tensors) {
            let ti = if k < n_tensors { k } else { rng.gen_range(0..n_tensors) };
            let vi = rng.gen_range(0..g.tensors[ti].values.len());
            let mut e = g.zeros_like();
            e.tensors[ti].values[vi] = 1.0;
            worst = worst.max(rel(g.tensors[ti].values[vi], fd(&e, 1e-5)));
        }
        worst
    }

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }
}

pub mod access {
    use emvlab::accessibility::{AccessEdge, AccessGraph, AccessNode, Facility, FacilityKind, Point, Tract};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    /// Jittered lattice at 300 m spacing, rows and columns drawn from `side`. Each adjacent pair is
    /// joined in both directions (sometimes only one) with random speeds.
    /// Two EMS stations and one hospital at random nodes.
    pub fn random_graph(rng: &mut ChaCha8Rng, side: std::ops::Range<usize>) -> AccessGraph {
        let (r, c) = (rng.gen_range(side.clone()), rng.gen_range(side));
        let nodes: Vec<AccessNode> = (0..r * c)
            .map(|i| AccessNode {
                id: format!("n{i}"),
                x: (i % c) as f64 * 300.0 + rng.gen_range(-80.0..80.0),
                y: (i / c) as f64 * 300.0 + rng.gen_range(-80.0..80.0),
                signalized: rng.gen_bool(0.6),
            })
            .collect();
        let mut edges = Vec::new();
        let mut join = |a: usize, b: usize, rng: &mut ChaCha8Rng| {
            let len = (nodes[a].x - nodes[b].x).hypot(nodes[a].y - nodes[b].y);
            let both = rng.gen_bool(0.85);
            let forward = both || rng.gen_bool(0.5);
            if forward || both {
                edges.push(AccessEdge { u: a, v: b, length: len, speed: rng.gen_range(6.0..20.0) });
            }
            if !forward || both {
                edges.push(AccessEdge { u: b, v: a, length: len, speed: rng.gen_range(6.0..20.0) });
            }
        };
        for i in 0..r * c {
            if i % c + 1 < c {
                join(i, i + 1, rng);
            }
            if i / c + 1 < r {
                join(i, i + c, rng);
            }
        }
        let n = r * c;
        let facilities = vec![
            Facility { node: rng.gen_range(0..n), kind: FacilityKind::Ems },
            Facility { node: rng.gen_range(0..n), kind: FacilityKind::Ems },
            Facility { node: rng.gen_range(0..n), kind: FacilityKind::Hospital },
        ];
        AccessGraph::new(nodes, edges, facilities).unwrap()
    }

    /// Bellman-Ford from one source; `reverse` follows edges backwards.
    pub fn bellman_ford(g: &AccessGraph, cost: &[f64], src: usize, reverse: bool) -> Vec<f64> {
        let mut d = vec![f64::INFINITY; g.nodes.len()];
        d[src] = 0.0;
        for _ in 0..g.nodes.len() {
            let mut changed = false;
            for (k, e) in g.edges.iter().enumerate() {
                let (a, b) = if reverse { (e.v, e.u) } else { (e.u, e.v) };
                if d[a] + cost[k] < d[b] {
                    d[b] = d[a] + cost[k];
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        d
    }

    fn inside(p: Point, poly: &[Point]) -> bool {
        let mut hit = false;
        let mut j = poly.len() - 1;
        for i in 0..poly.len() {
            let (a, b) = (poly[i], poly[j]);
            if (a.1 > p.1) != (b.1 > p.1) && p.0 < (b.0 - a.0) * (p.1 - a.1) / (b.1 - a.1) + a.0 {
                hit = !hit;
            }
            j = i;
        }
        hit
    }

    /// Population per node by sampling an `n × n` raster over the tracts'
    /// bounding box and giving each sample to its nearest node.
    pub fn raster_population(g: &AccessGraph, tracts: &[Tract], n: usize) -> Vec<f64> {
        let pts = tracts.iter().flat_map(|t| t.polygon.iter());
        let (x0, y0, x1, y1) = pts.fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
        );
        let (dx, dy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
        let mut pop = vec![0.0; g.nodes.len()];
        for i in 0..n {
            for j in 0..n {
                let p = (x0 + (i as f64 + 0.5) * dx, y0 + (j as f64 + 0.5) * dy);
                let density: f64 = tracts
                    .iter()
                    .filter(|t| inside(p, &t.polygon))
                    .map(|t| t.population / t.area)
                    .sum();
                if density == 0.0 {
                    continue;
                }
                let near = (0..g.nodes.len())
                    .min_by(|&a, &b| {
                        let da = (g.nodes[a].x - p.0).hypot(g.nodes[a].y - p.1);
                        let db = (g.nodes[b].x - p.0).hypot(g.nodes[b].y - p.1);
                        da.total_cmp(&db)
                    })
                    .unwrap();
                pop[near] += density * dx * dy;
            }
        }
        pop
    }

    /// Star-shaped (generally non-convex) polygon around `centre`.
    pub fn star(rng: &mut ChaCha8Rng, centre: Point, r: f64, k: usize) -> Vec<Point> {
        (0..k)
            .map(|i| {
                let a = i as f64 / k as f64 * std::f64::consts::TAU;
                let rr = r * rng.gen_range(0.5..1.0);
                (centre.0 + rr * a.cos(), centre.1 + rr * a.sin())
            })
            .collect()
    }
}
