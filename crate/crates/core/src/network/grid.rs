//! Synthetic network generators.

use super::io::{LinkRecord, NetworkFile, NodeRecord};
use super::{NetworkError, TrafficNetwork, VEHICLE_SPACING_M};

/// Bidirectional (or alternating one-way) rectangular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub link_length: f64,
    pub lanes: usize,
    pub ec_ratio: f64,
    pub free_speed: f64,
    pub emv_speed: f64,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize) -> GridSpec {
        GridSpec {
            rows,
            cols,
            link_length: 200.0,
            lanes: 2,
            ec_ratio: 0.0,
            free_speed: 6.0,
            emv_speed: 12.0,
        }
    }

    fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: &str| Err(NetworkError::Config(m.to_string()));
        if self.rows < 2 || self.cols < 2 {
            return bad("grid needs at least 2 rows and 2 columns");
        }
        if self.lanes < 1 {
            return bad("lanes_per_link must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.ec_ratio) {
            return bad("ec_ratio must lie in [0, 1]");
        }
        if !(self.link_length >= VEHICLE_SPACING_M) {
            return bad("link length shorter than one vehicle");
        }
        Ok(())
    }

    pub fn node_name(r: usize, c: usize) -> String {
        format!("r{r}c{c}")
    }

    pub fn build(&self) -> Result<TrafficNetwork, NetworkError> {
        self.validate()?;
        let mut nodes = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                nodes.push(NodeRecord {
                    id: Self::node_name(r, c),
                    x_m: c as f64 * self.link_length,
                    y_m: (self.rows - 1 - r) as f64 * self.link_length,
                });
            }
        }
        let per_lane = (self.link_length / VEHICLE_SPACING_M).floor();
        let k = per_lane * self.lanes as f64;
        let mut links = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                // N, E, S, W
                let candidates = [
                    (r > 0).then(|| (r - 1, c)),
                    (c + 1 < self.cols).then(|| (r, c + 1)),
                    (r + 1 < self.rows).then(|| (r + 1, c)),
                    (c > 0).then(|| (r, c - 1)),
                ];
                for (tr, tc) in candidates.into_iter().flatten() {
                    let from = Self::node_name(r, c);
                    let to = Self::node_name(tr, tc);
                    links.push(LinkRecord {
                        id: format!("{from}>{to}"),
                        from,
                        to,
                        length_m: self.link_length,
                        lanes: self.lanes,
                        k: Some(k),
                        c_ec: self.ec_ratio * k,
                        v_free_mps: self.free_speed,
                        v_emv_mps: self.emv_speed,
                    });
                }
            }
        }
        TrafficNetwork::from_file(NetworkFile {
            nodes,
            links,
            phases: None,
            right_on_any_phase: false,
        })
    }
}

/// `rows x cols` grid of bidirectional links with default speeds (6 m/s
/// background traffic, 12 m/s EMV).
pub fn generate_grid(
    rows: usize,
    cols: usize,
    link_length: f64,
    lanes_per_link: usize,
    ec_ratio: f64,
) -> Result<TrafficNetwork, NetworkError> {
    GridSpec {
        link_length,
        lanes: lanes_per_link,
        ec_ratio,
        ..GridSpec::new(rows, cols)
    }
    .build()
}

/// One-way street grid in the style of Manhattan's Hell's Kitchen: `streets`
/// east/west rows alternating direction (2 lanes, `C_EC = 0.15k`) crossed by
/// `avenues` north/south columns alternating direction (4 lanes,
/// `C_EC = 0.2k`). Blocks are 80 m between streets and 274 m between avenues.
pub fn manhattan_grid(streets: usize, avenues: usize) -> Result<NetworkFile, NetworkError> {
    if streets < 2 || avenues < 2 {
        return Err(NetworkError::Config("need at least 2 streets and 2 avenues".into()));
    }
    const STREET_GAP: f64 = 80.0;
    const AVENUE_GAP: f64 = 274.0;
    let name = |r: usize, c: usize| GridSpec::node_name(r, c);
    let mut nodes = Vec::new();
    for r in 0..streets {
        for c in 0..avenues {
            nodes.push(NodeRecord {
                id: name(r, c),
                x_m: c as f64 * AVENUE_GAP,
                y_m: (streets - 1 - r) as f64 * STREET_GAP,
            });
        }
    }
    let link = |from: String, to: String, length: f64, lanes: usize, ec: f64| {
        let k = (length / VEHICLE_SPACING_M).floor() * lanes as f64;
        LinkRecord {
            id: format!("{from}>{to}"),
            from,
            to,
            length_m: length,
            lanes,
            k: Some(k),
            c_ec: ec * k,
            v_free_mps: 6.0,
            v_emv_mps: 12.0,
        }
    };
    let mut links = Vec::new();
    for r in 0..streets {
        for c in 0..avenues - 1 {
            let (a, b) = if r % 2 == 0 { (c, c + 1) } else { (c + 1, c) };
            links.push(link(name(r, a), name(r, b), AVENUE_GAP, 2, 0.15));
        }
    }
    for c in 0..avenues {
        for r in 0..streets - 1 {
            let (a, b) = if c % 2 == 0 { (r, r + 1) } else { (r + 1, r) };
            links.push(link(name(a, c), name(b, c), STREET_GAP, 4, 0.2));
        }
    }
    Ok(NetworkFile {
        nodes,
        links,
        phases: None,
        right_on_any_phase: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Arm, Turn};

    #[test]
    fn five_by_five_grid_counts() {
        let net = generate_grid(5, 5, 200.0, 2, 0.0).unwrap();
        assert_eq!(net.node_count(), 25);
        assert_eq!(net.link_count(), 80);
        assert!(net.invariant_violations().is_empty());
    }

    #[test]
    fn smallest_grid() {
        let net = generate_grid(2, 2, 100.0, 1, 0.0).unwrap();
        assert_eq!(net.node_count(), 4);
        assert_eq!(net.link_count(), 8);
        assert!(net.invariant_violations().is_empty());
    }

    #[test]
    fn emergency_capacity_ratio() {
        let net = generate_grid(5, 5, 200.0, 2, 0.2).unwrap();
        for l in &net.links {
            assert_eq!(l.capacity, 52.0);
            assert!((l.emergency_capacity - 0.2 * l.capacity).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_dimensions() {
        assert!(matches!(
            generate_grid(1, 5, 200.0, 2, 0.0),
            Err(NetworkError::Config(_))
        ));
        assert!(generate_grid(3, 3, 200.0, 0, 0.0).is_err());
        assert!(generate_grid(3, 3, 200.0, 2, 1.5).is_err());
    }

    #[test]
    fn four_way_node_has_24_movements() {
        let net = generate_grid(3, 3, 200.0, 2, 0.0).unwrap();
        let center = net.node_by_name("r1c1").unwrap();
        let ix = &net.intersections[center];
        assert_eq!(ix.movements.len(), 24);
        assert_eq!(ix.phases.len(), 8);
        assert!(ix.empty_phases().is_empty());
        // south approach: lane 0 turns left (west), lane 1 goes through and right
        let south_in = ix.arm_in[Arm::South.index()].unwrap();
        let lanes: Vec<_> = net.links[south_in].lane_ids.clone().collect();
        let turns = |lane| {
            let mut t: Vec<Turn> = ix.lane_movements(lane).map(|m| m.turn).collect();
            t.dedup();
            t
        };
        assert_eq!(turns(lanes[0]), vec![Turn::Left]);
        assert_eq!(turns(lanes[1]), vec![Turn::Through, Turn::Right]);
    }

    #[test]
    fn deterministic_serialization() {
        let a = serde_json::to_string(generate_grid(4, 3, 150.0, 2, 0.1).unwrap().to_file()).unwrap();
        let b = serde_json::to_string(generate_grid(4, 3, 150.0, 2, 0.1).unwrap().to_file()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn manhattan_one_way() {
        let file = manhattan_grid(16, 3).unwrap();
        let net = TrafficNetwork::from_file(file).unwrap();
        assert_eq!(net.node_count(), 48);
        assert_eq!(net.link_count(), 16 * 2 + 3 * 15);
        for l in &net.links {
            assert!(net.link_between(l.to, l.from).is_none(), "one-way street reversed");
        }
        assert!(net.invariant_violations().is_empty(), "{:?}", net.invariant_violations());
    }
}
