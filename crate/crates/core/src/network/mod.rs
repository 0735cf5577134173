//! Static traffic-network model.
//!
//! Intersections are nodes, one-directional road segments are links, each link
//! carries `h >= 1` lanes of equal capacity. A movement is an (incoming lane,
//! outgoing lane) pair; vehicles may enter any lane of the target link, so a
//! lane-to-link turn expands to one movement per lane of the target link.
//! Every intersection carries a signal-phase table (8 phases by default).

mod grid;
mod io;
mod phases;

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use grid::{generate_grid, manhattan_grid, GridSpec};
pub use io::{load_network, save_network, LinkRecord, NetworkFile, NodeRecord};
pub use phases::{canonical_phase_table, PHASE_COUNT};

pub type NodeId = usize;
pub type LinkId = usize;
pub type LaneId = usize;

/// Effective vehicle length used to derive lane capacity from link length.
pub const VEHICLE_SPACING_M: f64 = 7.5;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("link `{link}` references missing node `{node}`")]
    DanglingNode { link: String, node: String },
    #[error("link `{link}`: {reason}")]
    InvalidLink { link: String, reason: String },
    #[error("node `{node}`: {reason}")]
    InvalidNode { node: String, reason: String },
    #[error("duplicate {kind} id `{id}`")]
    Duplicate { kind: &'static str, id: String },
    #[error("phase override for node `{node}`: {reason}")]
    InvalidPhase { node: String, reason: String },
    #[error("phase index {index} out of range (node has {count} phases)")]
    PhaseIndex { index: usize, count: usize },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("i/o error on network file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed network file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Approach side of an intersection, clockwise from north.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    North = 0,
    East = 1,
    South = 2,
    West = 3,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::North, Arm::East, Arm::South, Arm::West];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Arm {
        Arm::ALL[i % 4]
    }

    /// Bearing of the arm in radians (east = 0, counter-clockwise positive).
    fn bearing(self) -> f64 {
        use std::f64::consts::{FRAC_PI_2, PI};
        match self {
            Arm::North => FRAC_PI_2,
            Arm::East => 0.0,
            Arm::South => -FRAC_PI_2,
            Arm::West => PI,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Turn {
    Left,
    Through,
    Right,
    UTurn,
}

impl Turn {
    /// Turn performed by a vehicle arriving from `from` and leaving towards `to`.
    pub fn between(from: Arm, to: Arm) -> Turn {
        match (to.index() + 4 - from.index()) % 4 {
            0 => Turn::UTurn,
            1 => Turn::Left,
            2 => Turn::Through,
            _ => Turn::Right,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub id: LinkId,
    pub name: String,
    pub from: NodeId,
    pub to: NodeId,
    /// Meters.
    pub length: f64,
    /// Lane count `h`.
    pub lanes: usize,
    /// Normal capacity `k` in vehicles.
    pub capacity: f64,
    /// Emergency capacity `C_EC` in vehicles.
    pub emergency_capacity: f64,
    /// Non-EMV free-flow speed, m/s.
    pub free_speed: f64,
    /// EMV maximum speed `s_f`, m/s.
    pub emv_max_speed: f64,
    pub lane_ids: Range<LaneId>,
}

impl Link {
    /// Vehicles allowed on the link while an emergency lane can still be formed:
    /// `k + C_EC - k/h`.
    pub fn emergency_threshold(&self) -> f64 {
        self.capacity + self.emergency_capacity - self.capacity / self.lanes as f64
    }

    pub fn free_flow_time(&self) -> f64 {
        self.length / self.free_speed
    }

    pub fn emv_free_time(&self) -> f64 {
        self.length / self.emv_max_speed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lane {
    pub id: LaneId,
    pub link: LinkId,
    /// Position within the link, 0 is the innermost (left-turn) lane.
    pub index: usize,
    /// `x_max`.
    pub capacity: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Movement {
    pub in_lane: LaneId,
    pub out_lane: LaneId,
    pub in_link: LinkId,
    pub out_link: LinkId,
    pub turn: Turn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignalPhase {
    pub index: usize,
    /// Indices into [`Intersection::movements`].
    pub movements: Vec<usize>,
    /// Sorted `(in_lane, out_link)` pairs permitted by the phase.
    lane_turns: Vec<(LaneId, LinkId)>,
}

impl SignalPhase {
    pub fn is_empty(&self) -> bool {
        self.movements.is_empty()
    }

    pub fn permits(&self, in_lane: LaneId, out_link: LinkId) -> bool {
        self.lane_turns.binary_search(&(in_lane, out_link)).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Intersection {
    pub node: NodeId,
    pub incoming_links: Vec<LinkId>,
    pub outgoing_links: Vec<LinkId>,
    pub incoming_lanes: Vec<LaneId>,
    pub outgoing_lanes: Vec<LaneId>,
    pub movements: Vec<Movement>,
    pub phases: Vec<SignalPhase>,
    pub neighbors: Vec<NodeId>,
    /// Neighbor node on each arm.
    pub arm_neighbor: [Option<NodeId>; 4],
    /// Incoming link arriving from each arm.
    pub arm_in: [Option<LinkId>; 4],
    /// Outgoing link leaving towards each arm.
    pub arm_out: [Option<LinkId>; 4],
}

impl Intersection {
    /// Indices of phases that permit no movement at all (act as all-red).
    pub fn empty_phases(&self) -> Vec<usize> {
        self.phases
            .iter()
            .filter(|p| p.is_empty())
            .map(|p| p.index)
            .collect()
    }

    pub fn arm_of_neighbor(&self, node: NodeId) -> Option<Arm> {
        self.arm_neighbor
            .iter()
            .position(|n| *n == Some(node))
            .map(Arm::from_index)
    }

    /// Phases that let traffic on `in_link` continue onto `out_link`.
    pub fn phases_permitting(&self, in_link: LinkId, out_link: LinkId) -> Vec<usize> {
        self.phases
            .iter()
            .filter(|p| {
                p.movements.iter().any(|&m| {
                    let mv = &self.movements[m];
                    mv.in_link == in_link && mv.out_link == out_link
                })
            })
            .map(|p| p.index)
            .collect()
    }

    /// Movements of an incoming lane.
    pub fn lane_movements(&self, lane: LaneId) -> impl Iterator<Item = &Movement> {
        self.movements.iter().filter(move |m| m.in_lane == lane)
    }
}

/// Phase-table options.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseOptions {
    /// Permit right turns during every phase instead of only their table phases.
    #[serde(default)]
    pub right_on_any_phase: bool,
}

#[derive(Clone, Debug)]
pub struct TrafficNetwork {
    pub nodes: Vec<Node>,
    pub links: Vec<Link>,
    pub lanes: Vec<Lane>,
    pub intersections: Vec<Intersection>,
    /// Outgoing link ids per node.
    pub out_links: Vec<Vec<LinkId>>,
    /// Incoming link ids per node.
    pub in_links: Vec<Vec<LinkId>>,
    pub options: PhaseOptions,
    node_index: HashMap<String, NodeId>,
    link_index: HashMap<String, LinkId>,
    between: HashMap<(NodeId, NodeId), LinkId>,
    source: NetworkFile,
}

impl TrafficNetwork {
    /// Validate a network description and derive lanes, movements and phases.
    pub fn from_file(file: NetworkFile) -> Result<TrafficNetwork, NetworkError> {
        let mut node_index = HashMap::new();
        let mut nodes = Vec::with_capacity(file.nodes.len());
        for (i, n) in file.nodes.iter().enumerate() {
            if !(n.x_m.is_finite() && n.y_m.is_finite()) {
                return Err(NetworkError::InvalidNode {
                    node: n.id.clone(),
                    reason: "non-finite coordinates".into(),
                });
            }
            if node_index.insert(n.id.clone(), i).is_some() {
                return Err(NetworkError::Duplicate {
                    kind: "node",
                    id: n.id.clone(),
                });
            }
            nodes.push(Node {
                name: n.id.clone(),
                x: n.x_m,
                y: n.y_m,
            });
        }

        let mut links = Vec::with_capacity(file.links.len());
        let mut lanes = Vec::new();
        let mut link_index = HashMap::new();
        let mut between = HashMap::new();
        let mut out_links = vec![Vec::new(); nodes.len()];
        let mut in_links = vec![Vec::new(); nodes.len()];
        for rec in &file.links {
            let lookup = |name: &str| {
                node_index
                    .get(name)
                    .copied()
                    .ok_or_else(|| NetworkError::DanglingNode {
                        link: rec.id.clone(),
                        node: name.to_string(),
                    })
            };
            let from = lookup(&rec.from)?;
            let to = lookup(&rec.to)?;
            let invalid = |reason: &str| NetworkError::InvalidLink {
                link: rec.id.clone(),
                reason: reason.to_string(),
            };
            if from == to {
                return Err(invalid("self-loop"));
            }
            if !(rec.length_m > 0.0 && rec.length_m.is_finite()) {
                return Err(invalid("length must be positive"));
            }
            if rec.lanes == 0 {
                return Err(invalid("lane count must be at least 1"));
            }
            if !(rec.v_free_mps > 0.0 && rec.v_emv_mps > 0.0) {
                return Err(invalid("speeds must be positive"));
            }
            if rec.v_emv_mps < rec.v_free_mps {
                return Err(invalid("EMV maximum speed below non-EMV free speed"));
            }
            if !(rec.c_ec >= 0.0 && rec.c_ec.is_finite()) {
                return Err(invalid("emergency capacity must be nonnegative"));
            }
            let (capacity, lane_cap) = match rec.k {
                Some(k) => {
                    if !(k > 0.0 && k.is_finite()) {
                        return Err(invalid("capacity k must be positive"));
                    }
                    (k, (k / rec.lanes as f64).round() as usize)
                }
                None => {
                    let per_lane = (rec.length_m / VEHICLE_SPACING_M).floor() as usize;
                    (per_lane as f64 * rec.lanes as f64, per_lane)
                }
            };
            if lane_cap == 0 {
                return Err(invalid("lane capacity rounds to zero vehicles"));
            }
            let id = links.len();
            if link_index.insert(rec.id.clone(), id).is_some() {
                return Err(NetworkError::Duplicate {
                    kind: "link",
                    id: rec.id.clone(),
                });
            }
            if between.insert((from, to), id).is_some() {
                return Err(invalid("parallel link between the same ordered node pair"));
            }
            let first = lanes.len();
            for index in 0..rec.lanes {
                lanes.push(Lane {
                    id: first + index,
                    link: id,
                    index,
                    capacity: lane_cap,
                });
            }
            out_links[from].push(id);
            in_links[to].push(id);
            links.push(Link {
                id,
                name: rec.id.clone(),
                from,
                to,
                length: rec.length_m,
                lanes: rec.lanes,
                capacity,
                emergency_capacity: rec.c_ec,
                free_speed: rec.v_free_mps,
                emv_max_speed: rec.v_emv_mps,
                lane_ids: first..first + rec.lanes,
            });
        }

        let options = PhaseOptions {
            right_on_any_phase: file.right_on_any_phase,
        };
        let mut intersections = Vec::with_capacity(nodes.len());
        for v in 0..nodes.len() {
            let override_phases = match &file.phases {
                Some(map) => map.get(&nodes[v].name),
                None => None,
            };
            intersections.push(phases::build_intersection(
                v,
                &nodes,
                &links,
                &out_links[v],
                &in_links[v],
                options,
                override_phases,
                &link_index,
            )?);
        }
        if let Some(map) = &file.phases {
            for name in map.keys() {
                if !node_index.contains_key(name) {
                    return Err(NetworkError::UnknownNode(name.clone()));
                }
            }
        }

        Ok(TrafficNetwork {
            nodes,
            links,
            lanes,
            intersections,
            out_links,
            in_links,
            options,
            node_index,
            link_index,
            between,
            source: file,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.node_index.get(name).copied()
    }

    pub fn link_by_name(&self, name: &str) -> Option<LinkId> {
        self.link_index.get(name).copied()
    }

    pub fn link_between(&self, from: NodeId, to: NodeId) -> Option<LinkId> {
        self.between.get(&(from, to)).copied()
    }

    pub fn lane_link(&self, lane: LaneId) -> &Link {
        &self.links[self.lanes[lane].link]
    }

    /// Lane count of the link containing `lane` (`h(m)`).
    pub fn lanes_of_link_containing(&self, lane: LaneId) -> usize {
        self.lane_link(lane).lanes
    }

    /// The permitted movement set of phase `phase` at node `node`.
    pub fn movements_of_phase(
        &self,
        node: NodeId,
        phase: usize,
    ) -> Result<Vec<Movement>, NetworkError> {
        let ix = &self.intersections[node];
        let p = ix.phases.get(phase).ok_or(NetworkError::PhaseIndex {
            index: phase,
            count: ix.phases.len(),
        })?;
        Ok(p.movements.iter().map(|&m| ix.movements[m]).collect())
    }

    /// Movements grouped by outgoing link, per incoming lane.
    pub fn lane_targets(&self, node: NodeId, lane: LaneId) -> Vec<(LinkId, Vec<LaneId>)> {
        let mut out: Vec<(LinkId, Vec<LaneId>)> = Vec::new();
        for m in self.intersections[node].lane_movements(lane) {
            match out.iter_mut().find(|(l, _)| *l == m.out_link) {
                Some((_, v)) => v.push(m.out_lane),
                None => out.push((m.out_link, vec![m.out_lane])),
            }
        }
        out
    }

    /// Undirected hop distances between all node pairs (`usize::MAX` if unreachable).
    pub fn hop_distances(&self) -> Vec<Vec<usize>> {
        let n = self.nodes.len();
        let mut dist = vec![vec![usize::MAX; n]; n];
        for (s, row) in dist.iter_mut().enumerate() {
            row[s] = 0;
            let mut queue = std::collections::VecDeque::from([s]);
            while let Some(u) = queue.pop_front() {
                for &w in &self.intersections[u].neighbors {
                    if row[w] == usize::MAX {
                        row[w] = row[u] + 1;
                        queue.push_back(w);
                    }
                }
            }
        }
        dist
    }

    /// Serializable description equivalent to this network.
    pub fn to_file(&self) -> &NetworkFile {
        &self.source
    }

    /// Structural invariants; returns a description of every violation.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for l in &self.links {
            if l.from == l.to {
                errs.push(format!("link {} is a self-loop", l.name));
            }
            if !self.out_links[l.from].contains(&l.id) || !self.in_links[l.to].contains(&l.id) {
                errs.push(format!("adjacency inconsistent for link {}", l.name));
            }
        }
        for (v, outs) in self.out_links.iter().enumerate() {
            for &l in outs {
                if self.links[l].from != v {
                    errs.push(format!("out-adjacency of node {v} lists foreign link {l}"));
                }
            }
        }
        for (v, ins) in self.in_links.iter().enumerate() {
            for &l in ins {
                if self.links[l].to != v {
                    errs.push(format!("in-adjacency of node {v} lists foreign link {l}"));
                }
            }
        }
        for ix in &self.intersections {
            let name = &self.nodes[ix.node].name;
            let mut union: Vec<usize> = ix
                .phases
                .iter()
                .flat_map(|p| p.movements.iter().copied())
                .collect();
            union.sort_unstable();
            union.dedup();
            if union.len() != ix.movements.len() {
                errs.push(format!("phases of {name} do not cover all movements"));
            }
            if !self.out_links[ix.node].is_empty() {
                for &lane in &ix.incoming_lanes {
                    if ix.lane_movements(lane).next().is_none() {
                        errs.push(format!("in-lane {lane} at {name} has no movement"));
                    }
                }
            }
            if !self.in_links[ix.node].is_empty() {
                for &out in &ix.outgoing_links {
                    if !ix.movements.iter().any(|m| m.out_link == out) {
                        errs.push(format!("out-link {} unreachable at {name}", self.links[out].name));
                    }
                }
            }
            for m in &ix.movements {
                if self.links[m.in_link].to != ix.node || self.links[m.out_link].from != ix.node {
                    errs.push(format!("movement at {name} not incident to the node"));
                }
            }
        }
        errs
    }
}
