//! Benchmark controllers and routers: fixed time, max pressure, green-wave
//! pre-emption, static A* and periodically refreshed A*.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng as _;
use thiserror::Error;

use crate::dynamics::{EmvRouter, Signal, SignalController, SimState};
use crate::network::{LinkId, NodeId, TrafficNetwork};
use crate::pressure::{phase_pressure, PressureSnapshot};
use crate::routing::{LinkTimeField, RoutingError};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("node {node}: no phase permits the EMV movement from link {in_link} to link {out_link}")]
    NoPhaseForEmv {
        node: NodeId,
        in_link: LinkId,
        out_link: LinkId,
    },
    #[error("invalid controller configuration: {0}")]
    Config(String),
}

/// Phase active at time `t` for a cyclic schedule with equal splits.
pub fn fixed_time_phase(cycle_s: f64, phases: usize, offset_s: f64, t: f64) -> usize {
    let slot = cycle_s / phases as f64;
    let within = (t + offset_s).rem_euclid(cycle_s);
    ((within / slot + 1e-9).floor() as usize).min(phases - 1)
}

/// Cyclic fixed-time control with a seeded per-node offset.
#[derive(Clone, Debug)]
pub struct FixedTime {
    pub cycle_s: f64,
    pub offset_seed: u64,
    run_seed: u64,
    offsets: Vec<f64>,
}

impl FixedTime {
    pub fn new(cycle_s: f64, offset_seed: u64) -> Result<FixedTime, BaselineError> {
        if !(cycle_s > 0.0) {
            return Err(BaselineError::Config("cycle must be positive".into()));
        }
        Ok(FixedTime {
            cycle_s,
            offset_seed,
            run_seed: 0,
            offsets: Vec::new(),
        })
    }

    /// Offsets drawn as whole control steps within one cycle, from the
    /// offset seed mixed with the episode seed.
    pub fn draw_offsets(&self, nodes: usize, control_step_s: f64) -> Vec<f64> {
        let key = seed::derive(self.offset_seed, seed::stream::OFFSETS);
        let mut rng = seed::rng(seed::derive(key, self.run_seed));
        let slots = ((self.cycle_s / control_step_s).round() as usize).max(1);
        (0..nodes)
            .map(|_| rng.gen_range(0..slots) as f64 * control_step_s)
            .collect()
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }
}

impl SignalController for FixedTime {
    fn name(&self) -> &str {
        "fixed"
    }
    fn reset(&mut self, _net: &TrafficNetwork, seed: u64) {
        self.run_seed = seed;
        self.offsets.clear();
    }
    fn decide(&mut self, net: &TrafficNetwork, state: &SimState, _: &dyn EmvRouter) -> Vec<Signal> {
        if self.offsets.len() != net.node_count() {
            self.offsets = self.draw_offsets(net.node_count(), state.config.control_step_s);
        }
        (0..net.node_count())
            .map(|v| {
                let n = net.intersections[v].phases.len().max(1);
                Signal::Phase(fixed_time_phase(self.cycle_s, n, self.offsets[v], state.t))
            })
            .collect()
    }
}

/// Max-pressure phase choice: hold `current` while `held_s < min_phase_s`,
/// otherwise the phase with the largest pressure (lowest index on ties).
pub fn max_pressure_phase(
    net: &TrafficNetwork,
    node: NodeId,
    snap: &PressureSnapshot,
    min_phase_s: f64,
    held_s: f64,
    current: usize,
) -> usize {
    if held_s < min_phase_s {
        return current;
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for p in 0..net.intersections[node].phases.len() {
        let v = phase_pressure(net, node, p, snap).expect("phase index in range");
        if v > best.0 {
            best = (v, p);
        }
    }
    best.1
}

#[derive(Clone, Debug)]
pub struct MaxPressure {
    pub min_phase_s: f64,
    current: Vec<usize>,
    held: Vec<f64>,
}

impl MaxPressure {
    pub fn new(min_phase_s: f64) -> Result<MaxPressure, BaselineError> {
        if min_phase_s < 5.0 {
            return Err(BaselineError::Config("min_phase_s must be at least 5 s".into()));
        }
        Ok(MaxPressure {
            min_phase_s,
            current: Vec::new(),
            held: Vec::new(),
        })
    }
}

impl SignalController for MaxPressure {
    fn name(&self) -> &str {
        "maxpressure"
    }
    fn reset(&mut self, net: &TrafficNetwork, _seed: u64) {
        self.current = vec![0; net.node_count()];
        // allow a free choice at the first step
        self.held = vec![f64::INFINITY; net.node_count()];
    }
    fn decide(&mut self, net: &TrafficNetwork, state: &SimState, _: &dyn EmvRouter) -> Vec<Signal> {
        if self.current.len() != net.node_count() {
            self.reset(net, 0);
        }
        let snap = PressureSnapshot::from_counts(net, &state.lane_counts());
        let step = state.config.control_step_s;
        (0..net.node_count())
            .map(|v| {
                let p = max_pressure_phase(net, v, &snap, self.min_phase_s, self.held[v], self.current[v]);
                if p == self.current[v] {
                    self.held[v] += step;
                } else {
                    self.current[v] = p;
                    self.held[v] = step;
                }
                Signal::Phase(p)
            })
            .collect()
    }
}

/// Lowest-index phase at `node` permitting travel from `in_link` to `out_link`.
pub fn emv_phase(
    net: &TrafficNetwork,
    node: NodeId,
    in_link: LinkId,
    out_link: LinkId,
) -> Result<usize, BaselineError> {
    net.intersections[node]
        .phases_permitting(in_link, out_link)
        .first()
        .copied()
        .ok_or(BaselineError::NoPhaseForEmv {
            node,
            in_link,
            out_link,
        })
}

/// Phase for `node` given the base choice and the EMV's position: forced to
/// the EMV's movement when the EMV is within `trigger_m` of this stop line.
pub fn green_wave_override(
    net: &TrafficNetwork,
    base_phase: usize,
    node: NodeId,
    emv: Option<(LinkId, f64, LinkId)>,
    trigger_m: f64,
) -> Result<usize, BaselineError> {
    match emv {
        Some((in_link, dist, out_link)) if net.links[in_link].to == node && dist <= trigger_m => {
            emv_phase(net, node, in_link, out_link)
        }
        _ => Ok(base_phase),
    }
}

/// The EMV's `(in link, distance to stop line, out link)` when it is
/// approaching an intersection with a known onward link.
pub fn emv_approach(net: &TrafficNetwork, state: &SimState) -> Option<(LinkId, f64, LinkId)> {
    let emv = state.emv.as_ref()?;
    let link = emv.link.filter(|_| emv.is_active())?;
    let dist = emv.distance_to_stop_line(net)?;
    let out = net.link_between(net.links[link].to, emv.next_node?)?;
    Some((link, dist, out))
}

/// Green-wave pre-emption layered over a base controller.
pub struct GreenWave {
    pub base: Box<dyn SignalController + Send>,
    pub trigger_m: f64,
    name: String,
}

impl GreenWave {
    pub fn new(base: Box<dyn SignalController + Send>, trigger_m: f64) -> GreenWave {
        let name = format!("greenwave+{}", base.name());
        GreenWave {
            base,
            trigger_m,
            name,
        }
    }
}

impl SignalController for GreenWave {
    fn name(&self) -> &str {
        &self.name
    }
    fn reset(&mut self, net: &TrafficNetwork, seed: u64) {
        self.base.reset(net, seed);
    }
    fn decide(&mut self, net: &TrafficNetwork, state: &SimState, router: &dyn EmvRouter) -> Vec<Signal> {
        let mut signals = self.base.decide(net, state, router);
        if let Some(approach) = emv_approach(net, state) {
            let node = net.links[approach.0].to;
            if let Signal::Phase(base) = signals[node] {
                if let Ok(p) = green_wave_override(net, base, node, Some(approach), self.trigger_m) {
                    signals[node] = Signal::Phase(p);
                }
            }
        }
        signals
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Open {
    f: f64,
    g: f64,
    node: NodeId,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, o: &Self) -> Ordering {
        o.f.total_cmp(&self.f).then_with(|| o.node.cmp(&self.node))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Seconds per meter of Manhattan distance that no link beats; scaling the
/// Manhattan distance by it keeps the heuristic admissible and consistent.
fn heuristic_scale(net: &TrafficNetwork, field: &LinkTimeField) -> f64 {
    let mut scale = f64::INFINITY;
    for l in &net.links {
        let (a, b) = (&net.nodes[l.from], &net.nodes[l.to]);
        let manhattan = (a.x - b.x).abs() + (a.y - b.y).abs();
        if manhattan > 0.0 {
            scale = scale.min(field.time(l.id) / manhattan);
        }
    }
    if scale.is_finite() {
        scale
    } else {
        0.0
    }
}

/// Time-optimal link path by A* with a Manhattan-distance heuristic.
pub fn static_astar_route(
    net: &TrafficNetwork,
    field: &LinkTimeField,
    origin: NodeId,
    dest: NodeId,
) -> Result<(Vec<LinkId>, f64), RoutingError> {
    let scale = heuristic_scale(net, field);
    let goal = &net.nodes[dest];
    let h = |v: NodeId| {
        let n = &net.nodes[v];
        scale * ((n.x - goal.x).abs() + (n.y - goal.y).abs())
    };
    let mut g = vec![f64::INFINITY; net.node_count()];
    let mut via: Vec<Option<LinkId>> = vec![None; net.node_count()];
    let mut closed = vec![false; net.node_count()];
    let mut open = BinaryHeap::new();
    g[origin] = 0.0;
    open.push(Open {
        f: h(origin),
        g: 0.0,
        node: origin,
    });
    while let Some(Open { g: gu, node: u, .. }) = open.pop() {
        if closed[u] || gu > g[u] {
            continue;
        }
        if u == dest {
            let mut path = Vec::new();
            let mut at = dest;
            while let Some(l) = via[at] {
                path.push(l);
                at = net.links[l].from;
            }
            path.reverse();
            return Ok((path, g[dest]));
        }
        closed[u] = true;
        for &l in &net.out_links[u] {
            let w = net.links[l].to;
            let c = gu + field.time(l);
            if c < g[w] {
                g[w] = c;
                via[w] = Some(l);
                open.push(Open {
                    f: c + h(w),
                    g: c,
                    node: w,
                });
            }
        }
    }
    Err(RoutingError::NoRoute { from: origin, to: dest })
}

/// A* route planned at dispatch (`period_s = None`) or refreshed every
/// `period_s` seconds from the intersection the EMV is approaching.
#[derive(Clone, Debug)]
pub struct AstarRouter {
    pub period_s: Option<f64>,
    route: Vec<NodeId>,
    planned_at: f64,
}

impl AstarRouter {
    pub fn static_route() -> AstarRouter {
        AstarRouter {
            period_s: None,
            route: Vec::new(),
            planned_at: 0.0,
        }
    }

    pub fn dynamic(period_s: f64) -> AstarRouter {
        AstarRouter {
            period_s: Some(period_s),
            ..AstarRouter::static_route()
        }
    }

    /// Planned node sequence.
    pub fn route(&self) -> &[NodeId] {
        &self.route
    }

    fn plan(&mut self, net: &TrafficNetwork, state: &SimState, from: NodeId) -> Result<(), RoutingError> {
        let dest = state.emv.as_ref().expect("EMV present").spec.dest;
        let field = LinkTimeField::from_link_counts(net, state.link_counts());
        let (links, _) = static_astar_route(net, &field, from, dest)?;
        let mut nodes = vec![from];
        nodes.extend(links.iter().map(|&l| net.links[l].to));
        self.route = nodes;
        self.planned_at = state.t;
        Ok(())
    }
}

impl EmvRouter for AstarRouter {
    fn name(&self) -> &str {
        if self.period_s.is_some() {
            "dynamic_astar"
        } else {
            "static"
        }
    }

    fn on_dispatch(&mut self, net: &TrafficNetwork, state: &SimState) -> Result<(), RoutingError> {
        let origin = state.emv.as_ref().expect("EMV present").spec.origin;
        self.plan(net, state, origin)
    }

    fn on_control_step(&mut self, net: &TrafficNetwork, state: &SimState) {
        let Some(period) = self.period_s else {
            return;
        };
        let Some(emv) = state.emv.as_ref().filter(|e| e.is_active()) else {
            return;
        };
        if state.t - self.planned_at >= period - 1e-9 {
            let from = emv.approaching(net).expect("active EMV is on a link");
            if from != emv.spec.dest && self.plan(net, state, from).is_err() {
                self.route.clear();
            }
        }
    }

    fn next_hop(&mut self, _: &TrafficNetwork, _: &SimState, node: NodeId) -> Option<NodeId> {
        let i = self.route.iter().position(|&v| v == node)?;
        self.route.get(i + 1).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::generate_grid;

    #[test]
    fn fixed_time_schedule() {
        assert_eq!(fixed_time_phase(40.0, 8, 0.0, 0.0), 0);
        assert_eq!(fixed_time_phase(40.0, 8, 0.0, 5.0), 1);
        assert_eq!(fixed_time_phase(40.0, 8, 0.0, 39.0), 7);
        assert_eq!(fixed_time_phase(40.0, 8, 0.0, 40.0), 0);
        assert_eq!(fixed_time_phase(40.0, 8, 10.0, 0.0), 2);
    }

    #[test]
    fn offsets_reproducible() {
        let ft = FixedTime::new(40.0, 11).unwrap();
        let a = ft.draw_offsets(2, 5.0);
        assert_eq!(a, ft.draw_offsets(2, 5.0));
        assert!(a.iter().all(|o| o % 5.0 == 0.0 && *o < 40.0));
    }

    #[test]
    fn max_pressure_holds_and_ties() {
        let net = generate_grid(3, 3, 200.0, 2, 0.0).unwrap();
        let snap = PressureSnapshot::from_densities(vec![0.0; net.lanes.len()]);
        assert_eq!(max_pressure_phase(&net, 4, &snap, 5.0, 10.0, 3), 0);
        assert_eq!(max_pressure_phase(&net, 4, &snap, 5.0, 3.0, 3), 3);
    }

    #[test]
    fn green_wave_trigger() {
        let net = generate_grid(3, 3, 200.0, 2, 0.0).unwrap();
        let (a, b, c) = (3, 4, 5);
        let in_l = net.link_between(a, b).unwrap();
        let out_l = net.link_between(b, c).unwrap();
        let far = green_wave_override(&net, 6, b, Some((in_l, 600.0, out_l)), 200.0).unwrap();
        assert_eq!(far, 6);
        let near = green_wave_override(&net, 6, b, Some((in_l, 150.0, out_l)), 200.0).unwrap();
        assert!(net.intersections[b].phases_permitting(in_l, out_l).contains(&near));
    }

    #[test]
    fn astar_single_path() {
        let net = generate_grid(2, 2, 100.0, 1, 0.0).unwrap();
        let field = LinkTimeField::free_flow(&net);
        let (p, t) = static_astar_route(&net, &field, 0, 1).unwrap();
        assert_eq!(p, vec![net.link_between(0, 1).unwrap()]);
        assert!((t - 100.0 / 12.0).abs() < 1e-12);
    }
}
