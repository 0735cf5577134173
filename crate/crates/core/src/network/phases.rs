//! Arm assignment, lane-use rules and the signal-phase table.

use std::collections::{BTreeMap, HashMap};

use super::{
    Arm, Intersection, LaneId, Link, LinkId, Movement, NetworkError, Node, NodeId, PhaseOptions,
    SignalPhase, Turn,
};

pub const PHASE_COUNT: usize = 8;

/// Turn group used by the phase table; U-turns travel with left turns.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Group {
    Left,
    Through,
    Right,
}

fn group(turn: Turn) -> Group {
    match turn {
        Turn::Left | Turn::UTurn => Group::Left,
        Turn::Through => Group::Through,
        Turn::Right => Group::Right,
    }
}

const LTR: &[Group] = &[Group::Left, Group::Through, Group::Right];
const TR: &[Group] = &[Group::Through, Group::Right];
const L: &[Group] = &[Group::Left];

/// Canonical 8-phase table for a four-way intersection. Entry `p` lists the
/// `(approach arm, turn group)` pairs that phase `p` serves:
///
/// | phase | serves                         |
/// |-------|--------------------------------|
/// | 0     | N and S through + right        |
/// | 1     | E and W through + right        |
/// | 2     | N and S left                   |
/// | 3     | E and W left                   |
/// | 4     | N all turns                    |
/// | 5     | S all turns                    |
/// | 6     | E all turns                    |
/// | 7     | W all turns                    |
fn phase_table() -> [Vec<(Arm, &'static [Group])>; PHASE_COUNT] {
    use Arm::*;
    [
        vec![(North, TR), (South, TR)],
        vec![(East, TR), (West, TR)],
        vec![(North, L), (South, L)],
        vec![(East, L), (West, L)],
        vec![(North, LTR)],
        vec![(South, LTR)],
        vec![(East, LTR)],
        vec![(West, LTR)],
    ]
}

/// The canonical table as `(arm, turn)` lists, U-turns omitted.
pub fn canonical_phase_table() -> Vec<Vec<(Arm, Turn)>> {
    phase_table()
        .iter()
        .map(|entries| {
            entries
                .iter()
                .flat_map(|(arm, groups)| {
                    groups.iter().map(move |g| {
                        let t = match g {
                            Group::Left => Turn::Left,
                            Group::Through => Turn::Through,
                            Group::Right => Turn::Right,
                        };
                        (*arm, t)
                    })
                })
                .collect()
        })
        .collect()
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

/// Assign each neighbor to a distinct arm, minimizing total angular deviation.
fn assign_arms(
    node: NodeId,
    nodes: &[Node],
    neighbors: &[NodeId],
) -> Result<[Option<NodeId>; 4], NetworkError> {
    let here = &nodes[node];
    if neighbors.len() > 4 {
        return Err(NetworkError::InvalidNode {
            node: here.name.clone(),
            reason: format!("{} neighbors; at most 4 arms are supported", neighbors.len()),
        });
    }
    let mut bearings = Vec::with_capacity(neighbors.len());
    for &w in neighbors {
        let (dx, dy) = (nodes[w].x - here.x, nodes[w].y - here.y);
        if dx == 0.0 && dy == 0.0 {
            return Err(NetworkError::InvalidNode {
                node: here.name.clone(),
                reason: format!("coincides with neighbor `{}`", nodes[w].name),
            });
        }
        bearings.push(dy.atan2(dx));
    }
    let mut best: Option<(f64, [Option<NodeId>; 4])> = None;
    let mut arms = [Option::<NodeId>::None; 4];
    fn search(
        k: usize,
        cost: f64,
        neighbors: &[NodeId],
        bearings: &[f64],
        arms: &mut [Option<NodeId>; 4],
        best: &mut Option<(f64, [Option<NodeId>; 4])>,
    ) {
        if k == neighbors.len() {
            if best.as_ref().is_none_or(|(c, _)| cost < *c - 1e-12) {
                *best = Some((cost, *arms));
            }
            return;
        }
        for a in Arm::ALL {
            if arms[a.index()].is_none() {
                arms[a.index()] = Some(neighbors[k]);
                let c = cost + angle_diff(bearings[k], a.bearing());
                search(k + 1, c, neighbors, bearings, arms, best);
                arms[a.index()] = None;
            }
        }
    }
    search(0, 0.0, neighbors, &bearings, &mut arms, &mut best);
    Ok(best.map(|(_, a)| a).unwrap_or([None; 4]))
}

/// Turns served by lane `index` of an `h`-lane link given the available turns.
fn lane_turns(index: usize, h: usize, available: &[Turn]) -> Vec<Turn> {
    if h == 1 {
        return available.to_vec();
    }
    let designated: &[Turn] = if index == 0 {
        &[Turn::Left, Turn::UTurn]
    } else if index == h - 1 {
        &[Turn::Through, Turn::Right]
    } else {
        &[Turn::Through]
    };
    let own: Vec<Turn> = designated
        .iter()
        .copied()
        .filter(|t| available.contains(t))
        .collect();
    if !own.is_empty() {
        return own;
    }
    let fallback: &[Turn] = if index == 0 {
        &[Turn::Left, Turn::UTurn, Turn::Through, Turn::Right]
    } else if index == h - 1 {
        &[Turn::Right, Turn::Through, Turn::Left, Turn::UTurn]
    } else {
        &[Turn::Through, Turn::Left, Turn::Right, Turn::UTurn]
    };
    fallback
        .iter()
        .copied()
        .find(|t| available.contains(t))
        .into_iter()
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub(super) fn build_intersection(
    node: NodeId,
    nodes: &[Node],
    links: &[Link],
    outgoing: &[LinkId],
    incoming: &[LinkId],
    options: PhaseOptions,
    override_phases: Option<&Vec<Vec<(String, String)>>>,
    link_index: &HashMap<String, LinkId>,
) -> Result<Intersection, NetworkError> {
    let mut neighbors: Vec<NodeId> = incoming
        .iter()
        .map(|&l| links[l].from)
        .chain(outgoing.iter().map(|&l| links[l].to))
        .collect();
    neighbors.sort_unstable();
    neighbors.dedup();
    let arm_neighbor = assign_arms(node, nodes, &neighbors)?;
    let arm_of = |w: NodeId| {
        Arm::from_index(
            arm_neighbor
                .iter()
                .position(|n| *n == Some(w))
                .expect("neighbor has an arm"),
        )
    };
    let mut arm_in = [None; 4];
    let mut arm_out = [None; 4];
    for &l in incoming {
        arm_in[arm_of(links[l].from).index()] = Some(l);
    }
    for &l in outgoing {
        arm_out[arm_of(links[l].to).index()] = Some(l);
    }
    let dead_end = neighbors.len() == 1;

    let mut movements = Vec::new();
    for from in Arm::ALL {
        let Some(in_link) = arm_in[from.index()] else {
            continue;
        };
        let targets: Vec<(Turn, LinkId)> = Arm::ALL
            .iter()
            .filter_map(|&to| {
                let out = arm_out[to.index()]?;
                let turn = Turn::between(from, to);
                (turn != Turn::UTurn || dead_end).then_some((turn, out))
            })
            .collect();
        let available: Vec<Turn> = targets.iter().map(|(t, _)| *t).collect();
        let link = &links[in_link];
        for (index, in_lane) in link.lane_ids.clone().enumerate() {
            for turn in lane_turns(index, link.lanes, &available) {
                let out_link = targets.iter().find(|(t, _)| *t == turn).unwrap().1;
                for out_lane in links[out_link].lane_ids.clone() {
                    movements.push(Movement {
                        in_lane,
                        out_lane,
                        in_link,
                        out_link,
                        turn,
                    });
                }
            }
        }
    }

    let phase_sets: Vec<Vec<usize>> = match override_phases {
        None => {
            let table = phase_table();
            table
                .iter()
                .map(|entries| {
                    movements
                        .iter()
                        .enumerate()
                        .filter(|(_, m)| {
                            let from = arm_of(links[m.in_link].from);
                            let g = group(m.turn);
                            (options.right_on_any_phase && g == Group::Right)
                                || entries
                                    .iter()
                                    .any(|(arm, groups)| *arm == from && groups.contains(&g))
                        })
                        .map(|(i, _)| i)
                        .collect()
                })
                .collect()
        }
        Some(spec) => {
            let name = &nodes[node].name;
            let invalid = |reason: String| NetworkError::InvalidPhase {
                node: name.clone(),
                reason,
            };
            if spec.is_empty() {
                return Err(invalid("at least one phase is required".into()));
            }
            let mut sets = Vec::with_capacity(spec.len());
            for phase in spec {
                let mut set = Vec::new();
                for (a, b) in phase {
                    let (Some(&li), Some(&lo)) = (link_index.get(a), link_index.get(b)) else {
                        return Err(invalid(format!("unknown link in pair ({a}, {b})")));
                    };
                    let before = set.len();
                    set.extend(
                        movements
                            .iter()
                            .enumerate()
                            .filter(|(_, m)| m.in_link == li && m.out_link == lo)
                            .map(|(i, _)| i),
                    );
                    if set.len() == before {
                        return Err(invalid(format!("({a}, {b}) is not a movement of this node")));
                    }
                }
                set.sort_unstable();
                set.dedup();
                sets.push(set);
            }
            let mut covered = vec![false; movements.len()];
            for s in &sets {
                for &i in s {
                    covered[i] = true;
                }
            }
            if covered.iter().any(|c| !c) {
                return Err(invalid("phases do not cover every movement".into()));
            }
            sets
        }
    };

    let phases = phase_sets
        .into_iter()
        .enumerate()
        .map(|(index, set)| {
            let mut lane_turns: Vec<(LaneId, LinkId)> = set
                .iter()
                .map(|&i| (movements[i].in_lane, movements[i].out_link))
                .collect();
            lane_turns.sort_unstable();
            lane_turns.dedup();
            SignalPhase {
                index,
                movements: set,
                lane_turns,
            }
        })
        .collect();

    let incoming_links: Vec<LinkId> = Arm::ALL.iter().filter_map(|a| arm_in[a.index()]).collect();
    let outgoing_links: Vec<LinkId> = Arm::ALL.iter().filter_map(|a| arm_out[a.index()]).collect();
    let incoming_lanes = incoming_links
        .iter()
        .flat_map(|&l| links[l].lane_ids.clone())
        .collect();
    let outgoing_lanes = outgoing_links
        .iter()
        .flat_map(|&l| links[l].lane_ids.clone())
        .collect();
    Ok(Intersection {
        node,
        incoming_links,
        outgoing_links,
        incoming_lanes,
        outgoing_lanes,
        movements,
        phases,
        neighbors,
        arm_neighbor,
        arm_in,
        arm_out,
    })
}

/// Phase override map keyed by node name: each phase is a list of
/// `(incoming link id, outgoing link id)` pairs.
pub type PhaseOverrides = BTreeMap<String, Vec<Vec<(String, String)>>>;
