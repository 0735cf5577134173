//! Background demand: injection schedules and static free-flow routes.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::DynamicsError;
use crate::network::{LinkId, NodeId, TrafficNetwork};
use crate::routing::{prepopulate, LinkTimeField, RoutingTable};
use crate::seed;

/// A constant-rate flow from every origin to destinations drawn uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub origins: Vec<NodeId>,
    pub destinations: Vec<NodeId>,
    /// Vehicles per lane per hour.
    pub rate_vph_per_lane: f64,
    pub start_s: f64,
    pub end_s: f64,
}

impl FlowConfig {
    pub fn validate(&self, net: &TrafficNetwork, horizon_s: f64) -> Result<(), DynamicsError> {
        let bad = |m: String| Err(DynamicsError::Config(m));
        if !(self.rate_vph_per_lane >= 0.0 && self.rate_vph_per_lane.is_finite()) {
            return bad(format!("flow rate {} must be finite and nonnegative", self.rate_vph_per_lane));
        }
        if !(0.0 <= self.start_s && self.start_s <= self.end_s && self.end_s <= horizon_s + 1e-9) {
            return bad(format!(
                "flow window [{}, {}] must lie within [0, {horizon_s}]",
                self.start_s, self.end_s
            ));
        }
        for &n in self.origins.iter().chain(&self.destinations) {
            if n >= net.node_count() {
                return bad(format!("flow references unknown node {n}"));
            }
        }
        Ok(())
    }
}

/// One scheduled injection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Injection {
    pub time: f64,
    pub origin: NodeId,
    pub dest: NodeId,
}

/// Lanes an origin feeds into: the widest outgoing link.
fn origin_lanes(net: &TrafficNetwork, origin: NodeId) -> usize {
    net.out_links[origin]
        .iter()
        .map(|&l| net.links[l].lanes)
        .max()
        .unwrap_or(0)
}

/// Deterministic arithmetic spacing with uniform jitter of `±jitter` headways.
pub fn injection_schedule(
    net: &TrafficNetwork,
    flows: &[FlowConfig],
    jitter: f64,
    routes: &mut RouteCache,
    seed_value: u64,
) -> Vec<Injection> {
    let mut rng = seed::rng(seed::derive(seed_value, seed::stream::DEMAND));
    let mut out = Vec::new();
    for flow in flows {
        if flow.rate_vph_per_lane == 0.0 {
            continue;
        }
        for &origin in &flow.origins {
            let per_hour = flow.rate_vph_per_lane * origin_lanes(net, origin) as f64;
            if per_hour == 0.0 {
                continue;
            }
            let dests: Vec<NodeId> = flow
                .destinations
                .iter()
                .copied()
                .filter(|&d| d != origin && routes.reachable(net, origin, d))
                .collect();
            if dests.is_empty() {
                continue;
            }
            let headway = 3600.0 / per_hour;
            let mut k = 0usize;
            loop {
                let base = flow.start_s + (k as f64 + 0.5) * headway;
                if base >= flow.end_s {
                    break;
                }
                let shift = jitter * headway * rng.gen_range(-1.0..=1.0);
                let time = (base + shift).clamp(flow.start_s, flow.end_s);
                let dest = dests[rng.gen_range(0..dests.len())];
                out.push(Injection { time, origin, dest });
                k += 1;
            }
        }
    }
    out.sort_by(|a, b| a.time.total_cmp(&b.time));
    out
}

/// Free-flow shortest routes per destination, computed on demand.
#[derive(Clone, Debug, Default)]
pub struct RouteCache {
    tables: HashMap<NodeId, RoutingTable>,
    field: Option<LinkTimeField>,
}

impl RouteCache {
    fn table(&mut self, net: &TrafficNetwork, dest: NodeId) -> &RoutingTable {
        let field = self.field.get_or_insert_with(|| {
            LinkTimeField::new(net.links.iter().map(|l| l.free_flow_time()).collect())
                .expect("link lengths and speeds are validated positive")
        });
        self.tables
            .entry(dest)
            .or_insert_with(|| prepopulate(net, field, dest))
    }

    pub fn reachable(&mut self, net: &TrafficNetwork, origin: NodeId, dest: NodeId) -> bool {
        self.table(net, dest).eta[origin].is_finite()
    }

    /// Link sequence of the free-flow shortest path (lowest node id on ties).
    pub fn route(&mut self, net: &TrafficNetwork, origin: NodeId, dest: NodeId) -> Option<Vec<LinkId>> {
        let table = self.table(net, dest);
        let nodes = table.path_from(origin)?;
        nodes
            .windows(2)
            .map(|w| net.link_between(w[0], w[1]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::generate_grid;

    #[test]
    fn rate_and_window_respected() {
        let net = generate_grid(3, 3, 200.0, 2, 0.0).unwrap();
        let flow = FlowConfig {
            origins: vec![0],
            destinations: vec![8],
            rate_vph_per_lane: 180.0,
            start_s: 100.0,
            end_s: 700.0,
        };
        let mut cache = RouteCache::default();
        let s = injection_schedule(&net, &[flow], 0.2, &mut cache, 7);
        // 360 veh/h over 600 s
        assert_eq!(s.len(), 60);
        assert!(s.iter().all(|i| (100.0..=700.0).contains(&i.time) && i.dest == 8));
        assert!(s.windows(2).all(|w| w[0].time <= w[1].time));
    }

    #[test]
    fn routes_are_connected() {
        let net = generate_grid(3, 3, 200.0, 2, 0.0).unwrap();
        let mut cache = RouteCache::default();
        let r = cache.route(&net, 0, 8).unwrap();
        assert_eq!(r.len(), 4);
        for w in r.windows(2) {
            assert_eq!(net.links[w[0]].to, net.links[w[1]].from);
        }
    }
}
