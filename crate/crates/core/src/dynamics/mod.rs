//! Mesoscopic point-queue dynamics.
//!
//! Each lane holds a FIFO of vehicles in transit (ordered by arrival time at
//! the stop line) followed by a FIFO queue at the stop line. Queue heads
//! discharge at the saturation headway when the active phase permits their
//! movement and the target lane has room. Vehicles waiting to enter the
//! network sit in per-link entry buffers and count as in-network.
//!
//! The EMV is simulated in continuous time within each tick, is excluded from
//! lane counts, and moves at [`emv_speed`]. It crosses a stop line only on
//! green for its movement.

mod demand;
mod episode;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{LaneId, Link, LinkId, NodeId, TrafficNetwork};
use crate::routing::RoutingError;

pub use demand::{injection_schedule, FlowConfig, Injection, RouteCache};
pub use episode::{
    run_episode, write_metrics_csv, write_step_log, AllGreen, EmvOutcome, EpisodeMetrics,
    EpisodeSpec, MetricsRow, SignalController, StepLogRow,
};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("node {node}: phase index {index} is invalid ({count} phases)")]
    Control { node: NodeId, index: usize, count: usize },
    #[error("expected {expected} signals, got {got}")]
    SignalCount { expected: usize, got: usize },
    #[error("routing: {0}")]
    Routing(#[from] RoutingError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Average speed of background traffic on a link holding `n` vehicles:
/// `v_free * max(0.1, 1 - n/k)`.
pub fn congested_speed(n: usize, link: &Link) -> f64 {
    link.free_speed * (1.0 - n as f64 / link.capacity).max(0.1)
}

/// EMV speed on a link holding `n` other vehicles: the EMV maximum speed when
/// an emergency lane can form (`n <= k + C_EC - k/h`), else the congested
/// speed of background traffic.
pub fn emv_speed(n: usize, link: &Link) -> f64 {
    if emergency_lane_possible(n, link) {
        link.emv_max_speed
    } else {
        congested_speed(n, link)
    }
}

pub fn emergency_lane_possible(n: usize, link: &Link) -> bool {
    // tolerance absorbs rounding in `0.15 * k` style capacities
    n as f64 <= link.emergency_threshold() + 1e-9
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicsConfig {
    pub tick_s: f64,
    pub control_step_s: f64,
    /// Minimum gap between discharges from one lane.
    pub saturation_headway_s: f64,
    /// Injection jitter as a fraction of the headway.
    pub jitter: f64,
    /// Half-width of the intersection transit window.
    pub transit_window_m: f64,
    /// Extra simulated time allowed for the EMV past the horizon.
    pub emv_grace_s: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            tick_s: 1.0,
            control_step_s: 5.0,
            saturation_headway_s: 2.0,
            jitter: 0.2,
            transit_window_m: 25.0,
            emv_grace_s: 1200.0,
        }
    }
}

/// Signal state of one node for a control step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Signal {
    Phase(usize),
    /// Every movement permitted (test and trivial control).
    AllGreen,
}

pub fn signal_permits(
    net: &TrafficNetwork,
    node: NodeId,
    signal: Signal,
    in_lane: LaneId,
    out_link: LinkId,
) -> bool {
    match signal {
        Signal::AllGreen => true,
        Signal::Phase(p) => net.intersections[node].phases[p].permits(in_lane, out_link),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VehicleClass {
    Emv,
    NonEmv,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Travel {
    Buffered,
    InTransit { arrive_at: f64 },
    Queued { since: f64 },
    Done,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vehicle {
    pub id: usize,
    pub class: VehicleClass,
    pub route: Vec<LinkId>,
    /// Index into `route` of the current link.
    pub leg: usize,
    pub lane: Option<LaneId>,
    pub travel: Travel,
    pub entry_time: f64,
    pub exit_time: Option<f64>,
    pub wait_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trip {
    pub vehicle: usize,
    pub entry_time: f64,
    pub exit_time: f64,
}

impl Trip {
    pub fn duration(&self) -> f64 {
        self.exit_time - self.entry_time
    }
}

#[derive(Clone, Debug, Default)]
struct LaneState {
    transit: VecDeque<usize>,
    queue: VecDeque<usize>,
    ready_at: f64,
    last_arrival: f64,
}

impl LaneState {
    fn occupancy(&self) -> usize {
        self.transit.len() + self.queue.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmvSpec {
    pub origin: NodeId,
    pub dest: NodeId,
    pub dispatch_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum EmvPhase {
    Pending,
    OnLink,
    Arrived,
    Failed(String),
}

/// Time the EMV spent inside the `±window` zone around an intersection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transit {
    pub node: NodeId,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmvState {
    pub spec: EmvSpec,
    pub phase: EmvPhase,
    pub link: Option<LinkId>,
    /// Distance travelled along `link`, meters.
    pub pos: f64,
    pub path: Vec<LinkId>,
    pub arrived_at: Option<f64>,
    pub lanes_formed: usize,
    pub transits: Vec<Transit>,
    /// Intersection after the end of the current link, per the router.
    pub next_node: Option<NodeId>,
    clear_on_link: bool,
    entry_marked: bool,
    window_start: Option<(NodeId, f64)>,
}

impl EmvState {
    fn new(spec: EmvSpec) -> EmvState {
        EmvState {
            spec,
            phase: EmvPhase::Pending,
            link: None,
            pos: 0.0,
            path: Vec::new(),
            arrived_at: None,
            lanes_formed: 0,
            transits: Vec::new(),
            next_node: None,
            clear_on_link: true,
            entry_marked: false,
            window_start: None,
        }
    }

    pub fn is_active(&self) -> bool {
        self.phase == EmvPhase::OnLink
    }

    /// Meters to the stop line of the current link.
    pub fn distance_to_stop_line(&self, net: &TrafficNetwork) -> Option<f64> {
        let l = self.link.filter(|_| self.is_active())?;
        Some((net.links[l].length - self.pos).max(0.0))
    }

    /// Node at the end of the current link.
    pub fn approaching(&self, net: &TrafficNetwork) -> Option<NodeId> {
        let l = self.link.filter(|_| self.is_active())?;
        Some(net.links[l].to)
    }

    /// Fraction of the current link covered.
    pub fn fraction(&self, net: &TrafficNetwork) -> f64 {
        match self.link {
            Some(l) => (self.pos / net.links[l].length).clamp(0.0, 1.0),
            None => 0.0,
        }
    }
}

/// EMV path guidance consulted by the simulator.
pub trait EmvRouter {
    fn name(&self) -> &str;
    /// Called once at dispatch, before the first `next_hop`.
    fn on_dispatch(&mut self, net: &TrafficNetwork, state: &SimState) -> Result<(), RoutingError>;
    /// Called at the start of every control step.
    fn on_control_step(&mut self, _net: &TrafficNetwork, _state: &SimState) {}
    /// Called after every tick while the EMV is active.
    fn after_tick(&mut self, _net: &TrafficNetwork, _state: &SimState) {}
    /// Intersection to head for from `node`; `None` if none is known.
    fn next_hop(&mut self, net: &TrafficNetwork, state: &SimState, node: NodeId) -> Option<NodeId>;
    /// The (ETA, Next) pair exposed to agents, if the router maintains one.
    fn routing_view(&self) -> Option<(&[f64], &[Option<NodeId>])> {
        None
    }
}

/// Router for episodes without an EMV.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoRouter;

impl EmvRouter for NoRouter {
    fn name(&self) -> &str {
        "none"
    }
    fn on_dispatch(&mut self, _: &TrafficNetwork, state: &SimState) -> Result<(), RoutingError> {
        let spec = state.emv.as_ref().map(|e| e.spec).expect("dispatch without EMV");
        Err(RoutingError::NoRoute {
            from: spec.origin,
            to: spec.dest,
        })
    }
    fn next_hop(&mut self, _: &TrafficNetwork, _: &SimState, _: NodeId) -> Option<NodeId> {
        None
    }
}

/// Lane entry/exit events, recorded when tracing is enabled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TraceEvent {
    Enter { lane: LaneId, vehicle: usize },
    Leave { lane: LaneId, vehicle: usize },
}

/// Full simulation state.
#[derive(Clone, Debug)]
pub struct SimState {
    pub t: f64,
    ticks: u64,
    pub config: DynamicsConfig,
    pub vehicles: Vec<Vehicle>,
    lanes: Vec<LaneState>,
    link_counts: Vec<usize>,
    buffers: Vec<VecDeque<usize>>,
    schedule: Vec<Injection>,
    cursor: usize,
    routes: RouteCache,
    pub trips: Vec<Trip>,
    pub emv: Option<EmvState>,
    pub injected: usize,
    trace: Option<Vec<TraceEvent>>,
}

impl SimState {
    pub fn new(
        net: &TrafficNetwork,
        flows: &[FlowConfig],
        emv: Option<EmvSpec>,
        config: DynamicsConfig,
        horizon_s: f64,
        seed: u64,
    ) -> Result<SimState, DynamicsError> {
        let ratio = config.control_step_s / config.tick_s;
        if !(config.tick_s > 0.0 && ratio >= 1.0 && (ratio - ratio.round()).abs() < 1e-9) {
            return Err(DynamicsError::Config(
                "tick must be positive and divide the control step".into(),
            ));
        }
        for f in flows {
            f.validate(net, horizon_s)?;
        }
        if let Some(e) = emv {
            if e.origin >= net.node_count() || e.dest >= net.node_count() {
                return Err(DynamicsError::Config("EMV endpoint is not a node".into()));
            }
            if !(e.dispatch_s >= 0.0 && e.dispatch_s < horizon_s) {
                return Err(DynamicsError::Config(format!(
                    "EMV dispatch {} must lie in [0, {horizon_s})",
                    e.dispatch_s
                )));
            }
        }
        let mut routes = RouteCache::default();
        let schedule = injection_schedule(net, flows, config.jitter, &mut routes, seed);
        Ok(SimState {
            t: 0.0,
            ticks: 0,
            config,
            vehicles: Vec::new(),
            lanes: vec![LaneState::default(); net.lanes.len()],
            link_counts: vec![0; net.link_count()],
            buffers: vec![VecDeque::new(); net.link_count()],
            schedule,
            cursor: 0,
            routes,
            trips: Vec::new(),
            emv: emv.map(EmvState::new),
            injected: 0,
            trace: None,
        })
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> &[TraceEvent] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Non-EMV vehicles on each link.
    pub fn link_counts(&self) -> &[usize] {
        &self.link_counts
    }

    pub fn lane_count(&self, lane: LaneId) -> usize {
        self.lanes[lane].occupancy()
    }

    pub fn lane_counts(&self) -> Vec<usize> {
        self.lanes.iter().map(LaneState::occupancy).collect()
    }

    pub fn queue_len(&self, lane: LaneId) -> usize {
        self.lanes[lane].queue.len()
    }

    /// Vehicle ids queued at the stop line of `lane`, head first.
    pub fn queue(&self, lane: LaneId) -> impl Iterator<Item = usize> + '_ {
        self.lanes[lane].queue.iter().copied()
    }

    pub fn buffered(&self) -> usize {
        self.buffers.iter().map(VecDeque::len).sum()
    }

    pub fn in_network(&self) -> usize {
        self.buffered() + self.lanes.iter().map(LaneState::occupancy).sum::<usize>()
    }

    /// `injected == in_network + completed`.
    pub fn conservation_holds(&self) -> bool {
        self.injected == self.in_network() + self.trips.len()
    }

    pub fn pending_injections(&self) -> usize {
        self.schedule.len() - self.cursor
    }

    /// Place a vehicle directly at the stop line of `lane` (tests and fixtures).
    pub fn place_queued(
        &mut self,
        net: &TrafficNetwork,
        lane: LaneId,
        route: Vec<LinkId>,
    ) -> Result<usize, DynamicsError> {
        let link = net.lanes[lane].link;
        if route.first() != Some(&link) {
            return Err(DynamicsError::Config("route must start on the lane's link".into()));
        }
        if self.lanes[lane].occupancy() >= net.lanes[lane].capacity {
            return Err(DynamicsError::Config(format!("lane {lane} is full")));
        }
        let id = self.vehicles.len();
        self.vehicles.push(Vehicle {
            id,
            class: VehicleClass::NonEmv,
            route,
            leg: 0,
            lane: Some(lane),
            travel: Travel::Queued { since: self.t },
            entry_time: self.t,
            exit_time: None,
            wait_s: 0.0,
        });
        self.lanes[lane].queue.push_back(id);
        self.link_counts[link] += 1;
        self.injected += 1;
        self.record(TraceEvent::Enter { lane, vehicle: id });
        Ok(id)
    }

    fn record(&mut self, e: TraceEvent) {
        if let Some(t) = &mut self.trace {
            t.push(e);
        }
    }

    /// Advance by `dt` seconds (a whole number of ticks).
    pub fn step(
        &mut self,
        net: &TrafficNetwork,
        signals: &[Signal],
        dt: f64,
        router: &mut dyn EmvRouter,
    ) -> Result<(), DynamicsError> {
        if signals.len() != net.node_count() {
            return Err(DynamicsError::SignalCount {
                expected: net.node_count(),
                got: signals.len(),
            });
        }
        for (node, s) in signals.iter().enumerate() {
            if let Signal::Phase(p) = *s {
                let count = net.intersections[node].phases.len();
                if p >= count {
                    return Err(DynamicsError::Control { node, index: p, count });
                }
            }
        }
        let n = dt / self.config.tick_s;
        if !(n >= 1.0 - 1e-9 && (n - n.round()).abs() < 1e-9) {
            return Err(DynamicsError::Config(format!(
                "step {dt} s is not a multiple of the {} s tick",
                self.config.tick_s
            )));
        }
        for _ in 0..n.round() as usize {
            self.tick(net, signals, router)?;
        }
        Ok(())
    }

    fn tick(
        &mut self,
        net: &TrafficNetwork,
        signals: &[Signal],
        router: &mut dyn EmvRouter,
    ) -> Result<(), DynamicsError> {
        let dt = self.config.tick_s;
        let t0 = self.t;
        let te = (self.ticks + 1) as f64 * dt;
        self.inject(net, te);
        self.arrivals(te);
        self.discharge(net, signals, te, dt);
        self.release_buffers(net, te);
        self.advance_emv(net, signals, router, t0, te)?;
        self.ticks += 1;
        self.t = te;
        if self.emv.as_ref().is_some_and(EmvState::is_active) {
            router.after_tick(net, self);
            let next = {
                let emv = self.emv.as_ref().unwrap();
                let v = emv.approaching(net).unwrap();
                (v != emv.spec.dest).then_some(v)
            };
            let hop = match next {
                Some(v) => router.next_hop(net, self, v),
                None => None,
            };
            self.emv.as_mut().unwrap().next_node = hop;
        }
        Ok(())
    }

    fn inject(&mut self, net: &TrafficNetwork, te: f64) {
        while self.cursor < self.schedule.len() && self.schedule[self.cursor].time < te {
            let inj = self.schedule[self.cursor];
            self.cursor += 1;
            let route = self
                .routes
                .route(net, inj.origin, inj.dest)
                .expect("destinations are filtered for reachability");
            let id = self.vehicles.len();
            self.buffers[route[0]].push_back(id);
            self.vehicles.push(Vehicle {
                id,
                class: VehicleClass::NonEmv,
                route,
                leg: 0,
                lane: None,
                travel: Travel::Buffered,
                entry_time: inj.time,
                exit_time: None,
                wait_s: 0.0,
            });
            self.injected += 1;
        }
    }

    fn arrivals(&mut self, te: f64) {
        for lane in &mut self.lanes {
            while let Some(&v) = lane.transit.front() {
                let Travel::InTransit { arrive_at } = self.vehicles[v].travel else {
                    unreachable!("transit lane holds a non-transit vehicle")
                };
                if arrive_at > te {
                    break;
                }
                lane.transit.pop_front();
                lane.queue.push_back(v);
                self.vehicles[v].travel = Travel::Queued { since: arrive_at };
            }
        }
    }

    /// Lane of `link` to enter for a vehicle whose following link is `then`:
    /// the least occupied lane with room among those serving that movement.
    fn pick_lane(&self, net: &TrafficNetwork, link: LinkId, then: Option<LinkId>) -> Option<LaneId> {
        let l = &net.links[link];
        let ix = &net.intersections[l.to];
        l.lane_ids
            .clone()
            .filter(|&lane| self.lanes[lane].occupancy() < net.lanes[lane].capacity)
            .filter(|&lane| match then {
                None => true,
                Some(out) => ix.lane_movements(lane).any(|m| m.out_link == out),
            })
            .min_by_key(|&lane| (self.lanes[lane].occupancy(), lane))
    }

    fn enter_link(&mut self, net: &TrafficNetwork, v: usize, lane: LaneId, te: f64) {
        let link = net.lanes[lane].link;
        let l = &net.links[link];
        let travel = l.length / congested_speed(self.link_counts[link], l);
        let st = &mut self.lanes[lane];
        let arrive_at = (te + travel).max(st.last_arrival);
        st.last_arrival = arrive_at;
        st.transit.push_back(v);
        self.link_counts[link] += 1;
        let veh = &mut self.vehicles[v];
        veh.lane = Some(lane);
        veh.travel = Travel::InTransit { arrive_at };
        self.record(TraceEvent::Enter { lane, vehicle: v });
    }

    fn leave_lane(&mut self, net: &TrafficNetwork, lane: LaneId, te: f64) -> usize {
        let st = &mut self.lanes[lane];
        let v = st.queue.pop_front().expect("queue head exists");
        st.ready_at = te + self.config.saturation_headway_s;
        self.link_counts[net.lanes[lane].link] -= 1;
        self.record(TraceEvent::Leave { lane, vehicle: v });
        v
    }

    fn discharge(&mut self, net: &TrafficNetwork, signals: &[Signal], te: f64, dt: f64) {
        for node in 0..net.node_count() {
            let ix = &net.intersections[node];
            for &lane in &ix.incoming_lanes {
                let Some(&v) = self.lanes[lane].queue.front() else {
                    continue;
                };
                if self.lanes[lane].ready_at > te + 1e-9 {
                    continue;
                }
                let (leg, last) = {
                    let veh = &self.vehicles[v];
                    (veh.leg, veh.leg + 1 == veh.route.len())
                };
                if last {
                    self.leave_lane(net, lane, te);
                    let veh = &mut self.vehicles[v];
                    veh.travel = Travel::Done;
                    veh.lane = None;
                    veh.exit_time = Some(te);
                    self.trips.push(Trip {
                        vehicle: v,
                        entry_time: veh.entry_time,
                        exit_time: te,
                    });
                    continue;
                }
                let next = self.vehicles[v].route[leg + 1];
                if !signal_permits(net, node, signals[node], lane, next) {
                    continue;
                }
                let then = self.vehicles[v].route.get(leg + 2).copied();
                let Some(target) = self.pick_lane(net, next, then) else {
                    continue;
                };
                self.leave_lane(net, lane, te);
                self.vehicles[v].leg += 1;
                self.enter_link(net, v, target, te);
            }
        }
        for lane in &self.lanes {
            for &v in &lane.queue {
                self.vehicles[v].wait_s += dt;
            }
        }
    }

    fn release_buffers(&mut self, net: &TrafficNetwork, te: f64) {
        for link in 0..self.buffers.len() {
            for _ in 0..net.links[link].lanes {
                let Some(&v) = self.buffers[link].front() else {
                    break;
                };
                let then = self.vehicles[v].route.get(1).copied();
                let Some(lane) = self.pick_lane(net, link, then) else {
                    break;
                };
                self.buffers[link].pop_front();
                self.enter_link(net, v, lane, te);
            }
        }
    }

    fn advance_emv(
        &mut self,
        net: &TrafficNetwork,
        signals: &[Signal],
        router: &mut dyn EmvRouter,
        t0: f64,
        te: f64,
    ) -> Result<(), DynamicsError> {
        let Some(mut emv) = self.emv.take() else {
            return Ok(());
        };
        let result = self.drive(net, signals, router, &mut emv, t0, te);
        self.emv = Some(emv);
        result
    }

    fn drive(
        &mut self,
        net: &TrafficNetwork,
        signals: &[Signal],
        router: &mut dyn EmvRouter,
        emv: &mut EmvState,
        t0: f64,
        te: f64,
    ) -> Result<(), DynamicsError> {
        let mut clock = t0;
        if emv.phase == EmvPhase::Pending {
            if emv.spec.dispatch_s >= te {
                return Ok(());
            }
            clock = emv.spec.dispatch_s.max(t0);
            if emv.spec.origin == emv.spec.dest {
                emv.phase = EmvPhase::Arrived;
                emv.arrived_at = Some(clock);
                return Ok(());
            }
            // the router sees the EMV as dispatched but not yet on a link
            self.emv = Some(emv.clone());
            let dispatched = router.on_dispatch(net, self);
            let first = match dispatched {
                Ok(()) => router.next_hop(net, self, emv.spec.origin),
                Err(_) => None,
            };
            self.emv = None;
            let link = first.and_then(|n| net.link_between(emv.spec.origin, n));
            let Some(link) = link else {
                emv.phase = EmvPhase::Failed(format!(
                    "no route from node {} to node {}",
                    emv.spec.origin, emv.spec.dest
                ));
                return Ok(());
            };
            emv.phase = EmvPhase::OnLink;
            emv.link = Some(link);
            emv.path.push(link);
            emv.pos = 0.0;
        }
        if emv.phase != EmvPhase::OnLink {
            return Ok(());
        }
        let w = self.config.transit_window_m;
        loop {
            let link_id = emv.link.expect("EMV on a link");
            let link = &net.links[link_id];
            if emv.pos < link.length {
                let n = self.link_counts[link_id];
                if !emergency_lane_possible(n, link) {
                    emv.clear_on_link = false;
                }
                let speed = emv_speed(n, link);
                let need = (link.length - emv.pos) / speed;
                let (new_pos, new_clock) = if clock + need <= te {
                    (link.length, clock + need)
                } else {
                    (emv.pos + speed * (te - clock), te)
                };
                // window boundaries on this link
                let p_in = (link.length - w).max(0.0);
                let p_out = w.min(link.length);
                if let Some((u, start)) = emv.window_start {
                    if u == link.from && new_pos >= p_out {
                        let at = clock + (p_out - emv.pos).max(0.0) / speed;
                        emv.transits.push(Transit {
                            node: u,
                            seconds: at - start,
                        });
                        emv.window_start = None;
                    }
                }
                if !emv.entry_marked && new_pos >= p_in && link.to != emv.spec.dest {
                    let at = clock + (p_in - emv.pos).max(0.0) / speed;
                    emv.window_start = Some((link.to, at));
                    emv.entry_marked = true;
                }
                emv.pos = new_pos;
                clock = new_clock;
                if emv.pos < link.length {
                    break;
                }
            }
            // at the stop line
            let v = link.to;
            if v == emv.spec.dest {
                if emv.clear_on_link {
                    emv.lanes_formed += 1;
                }
                emv.phase = EmvPhase::Arrived;
                emv.arrived_at = Some(clock);
                emv.next_node = None;
                break;
            }
            let next = router.next_hop(net, self, v);
            let Some(out) = next.and_then(|j| net.link_between(v, j)) else {
                emv.phase = EmvPhase::Failed(format!("no route onward from node {v}"));
                break;
            };
            // U-turns are not signal movements; the EMV may reverse on any phase
            let uturn = net.links[out].to == link.from;
            let green = uturn
                || link
                    .lane_ids
                    .clone()
                    .any(|lane| signal_permits(net, v, signals[v], lane, out));
            if !green || clock >= te {
                break;
            }
            if emv.clear_on_link {
                emv.lanes_formed += 1;
            }
            emv.link = Some(out);
            emv.path.push(out);
            emv.pos = 0.0;
            emv.clear_on_link = true;
            emv.entry_marked = false;
        }
        Ok(())
    }
}
