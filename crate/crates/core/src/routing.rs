//! EMV path guidance.
//!
//! A destination-rooted Dijkstra pre-populates per-node `ETA` (time to the
//! destination) and `Next` (first hop). Afterwards each node refreshes its own
//! entry from its out-neighbors only:
//!
//! ```text
//! ETA_i <- min_{(i,j)} T_ij + ETA_j        Next_i <- argmin_j (lowest id on ties)
//! ```
//!
//! evaluated as a synchronous (Jacobi) sweep over a snapshot of the previous
//! table, so every node can update in parallel. Costs are forward link times
//! `T_ij = length / emv_speed(n_ij)`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::dynamics::{emv_speed, EmvRouter, SimState};
use crate::network::{LinkId, NodeId, TrafficNetwork};

#[derive(Debug, Error, PartialEq)]
pub enum RoutingError {
    #[error("link {link} has travel time {time}; link times must be positive and finite")]
    InvalidLinkTime { link: LinkId, time: f64 },
    #[error("field has {got} link times, network has {expected} links")]
    FieldSize { got: usize, expected: usize },
    #[error("node {0} cannot reach the destination")]
    Unreachable(NodeId),
    #[error("no route from node {from} to node {to}")]
    NoRoute { from: NodeId, to: NodeId },
}

/// EMV travel time per directed link, seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkTimeField {
    times: Vec<f64>,
}

impl LinkTimeField {
    pub fn new(times: Vec<f64>) -> Result<LinkTimeField, RoutingError> {
        for (link, &time) in times.iter().enumerate() {
            if !(time > 0.0 && time.is_finite()) {
                return Err(RoutingError::InvalidLinkTime { link, time });
            }
        }
        Ok(LinkTimeField { times })
    }

    /// Times at the EMV's maximum speed on empty links.
    pub fn free_flow(net: &TrafficNetwork) -> LinkTimeField {
        LinkTimeField {
            times: net.links.iter().map(|l| l.emv_free_time()).collect(),
        }
    }

    /// `length / emv_speed(n, link)` for per-link vehicle counts `n`.
    pub fn from_link_counts(net: &TrafficNetwork, counts: &[usize]) -> LinkTimeField {
        LinkTimeField {
            times: net
                .links
                .iter()
                .zip(counts)
                .map(|(l, &n)| l.length / emv_speed(n, l))
                .collect(),
        }
    }

    pub fn time(&self, link: LinkId) -> f64 {
        self.times[link]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn set(&mut self, link: LinkId, time: f64) -> Result<(), RoutingError> {
        if !(time > 0.0 && time.is_finite()) {
            return Err(RoutingError::InvalidLinkTime { link, time });
        }
        self.times[link] = time;
        Ok(())
    }

    fn check(&self, net: &TrafficNetwork) {
        assert_eq!(
            self.times.len(),
            net.link_count(),
            "link time field does not match the network"
        );
    }
}

/// Per-node ETA and Next toward a single destination.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTable {
    pub eta: Vec<f64>,
    pub next: Vec<Option<NodeId>>,
    pub dest: NodeId,
    /// Number of update sweeps applied since pre-population.
    pub epoch: u64,
}

impl RoutingTable {
    /// Table with every ETA infinite except the destination.
    pub fn unpopulated(node_count: usize, dest: NodeId) -> RoutingTable {
        let mut eta = vec![f64::INFINITY; node_count];
        eta[dest] = 0.0;
        RoutingTable {
            eta,
            next: vec![None; node_count],
            dest,
            epoch: 0,
        }
    }

    /// True when `other` holds identical ETA and Next entries.
    pub fn same_solution(&self, other: &RoutingTable) -> bool {
        self.dest == other.dest && self.eta == other.eta && self.next == other.next
    }

    /// Follow Next pointers from `from`; `None` if the chain breaks or loops.
    pub fn path_from(&self, from: NodeId) -> Option<Vec<NodeId>> {
        let mut path = vec![from];
        let mut at = from;
        while at != self.dest {
            at = self.next[at]?;
            if path.len() > self.eta.len() {
                return None;
            }
            path.push(at);
        }
        Some(path)
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    cost: f64,
    node: NodeId,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest time from every node to `dest` (reverse Dijkstra).
pub fn times_to(net: &TrafficNetwork, field: &LinkTimeField, dest: NodeId) -> Vec<f64> {
    field.check(net);
    let mut dist = vec![f64::INFINITY; net.node_count()];
    let mut heap = BinaryHeap::new();
    dist[dest] = 0.0;
    heap.push(Entry {
        cost: 0.0,
        node: dest,
    });
    while let Some(Entry { cost, node }) = heap.pop() {
        if cost > dist[node] {
            continue;
        }
        for &l in &net.in_links[node] {
            let u = net.links[l].from;
            let c = field.time(l) + cost;
            if c < dist[u] {
                dist[u] = c;
                heap.push(Entry { cost: c, node: u });
            }
        }
    }
    dist
}

/// Best successor of `node` under `eta`: minimum `T_ij + ETA_j`, lowest `j` on ties.
fn best_successor(
    net: &TrafficNetwork,
    field: &LinkTimeField,
    eta: &[f64],
    node: NodeId,
) -> (f64, Option<NodeId>) {
    let mut best = (f64::INFINITY, None);
    for &l in &net.out_links[node] {
        let j = net.links[l].to;
        let c = field.time(l) + eta[j];
        if c == f64::INFINITY {
            continue;
        }
        let better = match best.1 {
            None => true,
            Some(bj) => c < best.0 || (c == best.0 && j < bj),
        };
        if better {
            best = (c, Some(j));
        }
    }
    best
}

/// Pre-populate ETA and Next with a destination-rooted Dijkstra.
pub fn prepopulate(net: &TrafficNetwork, field: &LinkTimeField, dest: NodeId) -> RoutingTable {
    let eta = times_to(net, field, dest);
    let next = (0..net.node_count())
        .map(|i| {
            if i == dest || eta[i].is_infinite() {
                None
            } else {
                best_successor(net, field, &eta, i).1
            }
        })
        .collect();
    RoutingTable {
        eta,
        next,
        dest,
        epoch: 0,
    }
}

/// One synchronous neighbor-only sweep. Returns the new table and the number
/// of link evaluations performed (each directed link leaving a non-destination
/// node exactly once).
pub fn update_step_counted(
    net: &TrafficNetwork,
    table: &RoutingTable,
    field: &LinkTimeField,
) -> (RoutingTable, usize) {
    field.check(net);
    let n = net.node_count();
    let mut eta = vec![f64::INFINITY; n];
    let mut next = vec![None; n];
    let mut touched = 0;
    for i in 0..n {
        if i == table.dest {
            eta[i] = 0.0;
            continue;
        }
        touched += net.out_links[i].len();
        let (c, j) = best_successor(net, field, &table.eta, i);
        eta[i] = c;
        next[i] = j;
    }
    (
        RoutingTable {
            eta,
            next,
            dest: table.dest,
            epoch: table.epoch + 1,
        },
        touched,
    )
}

pub fn update_step(net: &TrafficNetwork, table: &RoutingTable, field: &LinkTimeField) -> RoutingTable {
    update_step_counted(net, table, field).0
}

/// The EMV's next intersection from `node`; `Ok(None)` at the destination.
pub fn emv_next_hop(table: &RoutingTable, node: NodeId) -> Result<Option<NodeId>, RoutingError> {
    if node == table.dest {
        return Ok(None);
    }
    match table.next[node] {
        Some(j) if table.eta[node].is_finite() => Ok(Some(j)),
        _ => Err(RoutingError::Unreachable(node)),
    }
}

/// The (ETA, Next) pair exposed to agents and the EMV driver. It refreshes
/// only once per link: at the first observation where the EMV has covered at
/// least half of its current link.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenRouting {
    pub eta: Vec<f64>,
    pub next: Vec<Option<NodeId>>,
    link: Option<LinkId>,
    refreshed: bool,
}

impl FrozenRouting {
    pub fn new(table: &RoutingTable) -> FrozenRouting {
        FrozenRouting {
            eta: table.eta.clone(),
            next: table.next.clone(),
            link: None,
            refreshed: false,
        }
    }

    /// Feed the EMV's current link and progress fraction; returns `true` when
    /// this call refreshed the snapshot.
    pub fn observe(&mut self, table: &RoutingTable, link: Option<LinkId>, fraction: f64) -> bool {
        debug_assert!((0.0..=1.0 + 1e-9).contains(&fraction));
        if link != self.link {
            self.link = link;
            self.refreshed = false;
        }
        if link.is_some() && !self.refreshed && fraction >= 0.5 {
            self.eta.clone_from(&table.eta);
            self.next.clone_from(&table.next);
            self.refreshed = true;
            return true;
        }
        false
    }
}

/// Link sequence along a node path.
pub fn links_along(net: &TrafficNetwork, nodes: &[NodeId]) -> Result<Vec<LinkId>, RoutingError> {
    nodes
        .windows(2)
        .map(|w| {
            net.link_between(w[0], w[1])
                .ok_or(RoutingError::NoRoute { from: w[0], to: w[1] })
        })
        .collect()
}

/// The decentralized router: Dijkstra at dispatch, one neighbor-only sweep
/// per control step, and EMV guidance from the half-link frozen snapshot.
#[derive(Clone, Debug, Default)]
pub struct DecentralizedRouter {
    table: Option<RoutingTable>,
    frozen: Option<FrozenRouting>,
    pub refreshes: usize,
}

impl DecentralizedRouter {
    pub fn new() -> DecentralizedRouter {
        DecentralizedRouter::default()
    }

    pub fn table(&self) -> Option<&RoutingTable> {
        self.table.as_ref()
    }

    pub fn frozen(&self) -> Option<&FrozenRouting> {
        self.frozen.as_ref()
    }
}

impl EmvRouter for DecentralizedRouter {
    fn name(&self) -> &str {
        "decentralized"
    }

    fn on_dispatch(&mut self, net: &TrafficNetwork, state: &SimState) -> Result<(), RoutingError> {
        let emv = state.emv.as_ref().expect("EMV present");
        let field = LinkTimeField::from_link_counts(net, state.link_counts());
        let table = prepopulate(net, &field, emv.spec.dest);
        if table.eta[emv.spec.origin].is_infinite() {
            return Err(RoutingError::Unreachable(emv.spec.origin));
        }
        self.frozen = Some(FrozenRouting::new(&table));
        self.table = Some(table);
        self.refreshes = 0;
        Ok(())
    }

    fn on_control_step(&mut self, net: &TrafficNetwork, state: &SimState) {
        if !state.emv.as_ref().is_some_and(|e| e.is_active()) {
            return;
        }
        if let Some(table) = &self.table {
            let field = LinkTimeField::from_link_counts(net, state.link_counts());
            self.table = Some(update_step(net, table, &field));
        }
    }

    fn after_tick(&mut self, net: &TrafficNetwork, state: &SimState) {
        let (Some(table), Some(frozen), Some(emv)) = (&self.table, &mut self.frozen, &state.emv) else {
            return;
        };
        if frozen.observe(table, emv.link, emv.fraction(net)) {
            self.refreshes += 1;
        }
    }

    fn next_hop(&mut self, _: &TrafficNetwork, _: &SimState, node: NodeId) -> Option<NodeId> {
        self.frozen.as_ref()?.next[node]
    }

    fn routing_view(&self) -> Option<(&[f64], &[Option<NodeId>])> {
        self.frozen.as_ref().map(|f| (f.eta.as_slice(), f.next.as_slice()))
    }
}
