//! Pressure definitions.
//!
//! Lane pressure compares the density of an incoming lane with the mean
//! density of every outgoing link it can feed (lane-to-link movements,
//! `1/h(m)` weighting) and takes the absolute value. The EMVLight
//! intersection pressure averages lane pressures; the PressLight variants work
//! per lane-to-lane movement, signed, and sum.

use thiserror::Error;

use crate::network::{LaneId, NetworkError, NodeId, TrafficNetwork};

#[derive(Debug, Error, PartialEq)]
pub enum PressureError {
    #[error("lane {0} has no movements; its pressure is undefined")]
    NoMovements(LaneId),
    #[error("node {0} has no incoming lanes; its pressure is undefined")]
    NoIncomingLanes(NodeId),
    #[error("phase index {index} out of range (node has {count} phases)")]
    PhaseIndex { index: usize, count: usize },
}

/// Per-lane densities `x(l) / x_max(l)`, indexed by lane id.
#[derive(Clone, Debug, PartialEq)]
pub struct PressureSnapshot {
    density: Vec<f64>,
}

impl PressureSnapshot {
    pub fn from_densities(density: Vec<f64>) -> PressureSnapshot {
        debug_assert!(density.iter().all(|d| (0.0..=1.0).contains(d)));
        PressureSnapshot { density }
    }

    /// Densities from vehicle counts using each lane's own capacity.
    pub fn from_counts(net: &TrafficNetwork, counts: &[usize]) -> PressureSnapshot {
        Self::from_counts_with_capacity(
            counts,
            &net.lanes.iter().map(|l| l.capacity).collect::<Vec<_>>(),
        )
    }

    pub fn from_counts_with_capacity(counts: &[usize], capacity: &[usize]) -> PressureSnapshot {
        let density = counts
            .iter()
            .zip(capacity)
            .map(|(&x, &c)| (x as f64 / c as f64).min(1.0))
            .collect();
        PressureSnapshot { density }
    }

    pub fn density(&self, lane: LaneId) -> f64 {
        self.density[lane]
    }

    pub fn densities(&self) -> &[f64] {
        &self.density
    }

    /// Snapshot with every density multiplied by `c`.
    pub fn scaled(&self, c: f64) -> PressureSnapshot {
        PressureSnapshot {
            density: self.density.iter().map(|d| d * c).collect(),
        }
    }
}

/// `w(l) = | x(l)/x_max(l) - sum_{(l,m) in M} x(m) / (h(m) x_max(m)) |`.
pub fn lane_pressure(
    net: &TrafficNetwork,
    node: NodeId,
    lane: LaneId,
    snap: &PressureSnapshot,
) -> Result<f64, PressureError> {
    let mut downstream = 0.0;
    let mut any = false;
    for m in net.intersections[node].lane_movements(lane) {
        any = true;
        downstream += snap.density(m.out_lane) / net.links[m.out_link].lanes as f64;
    }
    if !any {
        return Err(PressureError::NoMovements(lane));
    }
    Ok((snap.density(lane) - downstream).abs())
}

/// Average lane pressure over all incoming lanes of `node`.
///
/// Incoming lanes without movements (pure sink nodes) are skipped; a node
/// without any incoming lane has undefined pressure.
pub fn intersection_pressure_emvlight(
    net: &TrafficNetwork,
    node: NodeId,
    snap: &PressureSnapshot,
) -> Result<f64, PressureError> {
    let ix = &net.intersections[node];
    if ix.incoming_lanes.is_empty() {
        return Err(PressureError::NoIncomingLanes(node));
    }
    if ix.movements.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for &lane in &ix.incoming_lanes {
        sum += lane_pressure(net, node, lane, snap)?;
    }
    Ok(sum / ix.incoming_lanes.len() as f64)
}

/// Sum of lane pressures (the ablation variant of the intersection pressure).
pub fn intersection_pressure_sum(
    net: &TrafficNetwork,
    node: NodeId,
    snap: &PressureSnapshot,
) -> Result<f64, PressureError> {
    let ix = &net.intersections[node];
    if ix.incoming_lanes.is_empty() {
        return Err(PressureError::NoIncomingLanes(node));
    }
    ix.incoming_lanes
        .iter()
        .filter(|&&l| ix.lane_movements(l).next().is_some())
        .map(|&l| lane_pressure(net, node, l, snap))
        .sum()
}

/// `w*(l, m) = x(l)/x_max(l) - x(m)/x_max(m)`.
pub fn presslight_movement_pressure(l: LaneId, m: LaneId, snap: &PressureSnapshot) -> f64 {
    snap.density(l) - snap.density(m)
}

/// `P*_i = | sum over M*_i of w*(l, m) |`.
///
/// PressLight's movements are lane-to-lane without turn restrictions per
/// lane: `M*_i` pairs every incoming lane with every lane of each outgoing
/// link that does not lead back where the lane came from.
pub fn presslight_intersection_pressure(
    net: &TrafficNetwork,
    node: NodeId,
    snap: &PressureSnapshot,
) -> f64 {
    let ix = &net.intersections[node];
    let mut sum = 0.0;
    for &l in &ix.incoming_lanes {
        let back = net.lane_link(l).from;
        for &o in &ix.outgoing_links {
            let out = &net.links[o];
            if out.to == back {
                continue;
            }
            for m in out.lane_ids.clone() {
                sum += presslight_movement_pressure(l, m, snap);
            }
        }
    }
    sum.abs()
}

/// Signed movement pressure summed over the movements a phase permits.
pub fn phase_pressure(
    net: &TrafficNetwork,
    node: NodeId,
    phase: usize,
    snap: &PressureSnapshot,
) -> Result<f64, PressureError> {
    let movements = net.movements_of_phase(node, phase).map_err(|e| match e {
        NetworkError::PhaseIndex { index, count } => PressureError::PhaseIndex { index, count },
        _ => unreachable!(),
    })?;
    Ok(movements
        .iter()
        .map(|m| presslight_movement_pressure(m.in_lane, m.out_lane, snap))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{generate_grid, Arm};

    fn center() -> (TrafficNetwork, NodeId) {
        let net = generate_grid(3, 3, 200.0, 2, 0.0).unwrap();
        let c = net.node_by_name("r1c1").unwrap();
        (net, c)
    }

    fn lanes(net: &TrafficNetwork, link: usize) -> Vec<LaneId> {
        net.links[link].lane_ids.clone().collect()
    }

    #[test]
    fn single_out_link_example() {
        // x(l)/x_max = 0.4, through-only to a 2-lane link with 0.5 and 0.1 -> |0.4 - 0.3|
        let (net, c) = center();
        let ix = &net.intersections[c];
        let mut d = vec![0.0; net.lanes.len()];
        let west_in = lanes(&net, ix.arm_in[Arm::West.index()].unwrap());
        // lane 0 of the west approach turns left only (to the north link)
        let north_out = lanes(&net, ix.arm_out[Arm::North.index()].unwrap());
        d[west_in[0]] = 0.4;
        d[north_out[0]] = 0.5;
        d[north_out[1]] = 0.1;
        let snap = PressureSnapshot::from_densities(d);
        let w = lane_pressure(&net, c, west_in[0], &snap).unwrap();
        assert!((w - 0.1).abs() < 1e-12);
    }

    #[test]
    fn equal_density_single_lane_is_zero() {
        let net = generate_grid(3, 3, 200.0, 1, 0.0).unwrap();
        let snap = PressureSnapshot::from_densities(vec![0.3; net.lanes.len()]);
        // corner node r0c0 with one-lane links: each lane feeds two links
        // (h = 1 each), so use a sum check on an interior movement instead
        for m in &net.intersections[4].movements {
            assert_eq!(presslight_movement_pressure(m.in_lane, m.out_lane, &snap), 0.0);
        }
    }

    #[test]
    fn empty_lanes_zero_pressure() {
        let (net, c) = center();
        let snap = PressureSnapshot::from_densities(vec![0.0; net.lanes.len()]);
        assert_eq!(intersection_pressure_emvlight(&net, c, &snap).unwrap(), 0.0);
        assert_eq!(presslight_intersection_pressure(&net, c, &snap), 0.0);
    }

    #[test]
    fn movement_pressure_bounds() {
        let snap = PressureSnapshot::from_densities(vec![1.0, 0.0, 0.2, 0.4]);
        assert_eq!(presslight_movement_pressure(0, 1, &snap), 1.0);
        assert!((presslight_movement_pressure(2, 3, &snap) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn phase_pressure_out_of_range() {
        let (net, c) = center();
        let snap = PressureSnapshot::from_densities(vec![0.0; net.lanes.len()]);
        assert_eq!(
            phase_pressure(&net, c, 9, &snap),
            Err(PressureError::PhaseIndex { index: 9, count: 8 })
        );
    }
}
