//! EMS accessibility analytics on planar road graphs.
//!
//! Travel times are free-flow times plus a per-edge delay proportional to the
//! local density of signalized intersections. Population reaches nodes through
//! a Voronoi partition intersected with census-tract polygons.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{run_episode, DynamicsError, EmvRouter, EpisodeSpec, SignalController};
use crate::network::TrafficNetwork;

#[derive(Debug, Error)]
pub enum AccessError {
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("no {0:?} facilities in the graph")]
    NoFacilities(FacilityKind),
    #[error("nodes {0} and {1} share coordinates")]
    DuplicateCoordinates(String, String),
    #[error("invalid tract {index}: {reason}")]
    Tract { index: usize, reason: String },
    #[error("total population is zero")]
    ZeroPopulation,
    #[error("tau grid must be sorted ascending")]
    UnsortedTaus,
    #[error("{path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FacilityKind {
    Ems,
    Hospital,
}

impl FacilityKind {
    pub const ALL: [FacilityKind; 2] = [FacilityKind::Ems, FacilityKind::Hospital];

    pub fn label(self) -> &'static str {
        match self {
            FacilityKind::Ems => "ems",
            FacilityKind::Hospital => "hospital",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccessNode {
    pub id: String,
    #[serde(rename = "x_m")]
    pub x: f64,
    #[serde(rename = "y_m")]
    pub y: f64,
    #[serde(deserialize_with = "flag", serialize_with = "flag_out")]
    pub signalized: bool,
}

fn flag<'de, D: serde::Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    let s = String::deserialize(d)?;
    match s.trim() {
        "1" | "true" | "True" => Ok(true),
        "0" | "false" | "False" | "" => Ok(false),
        other => Err(serde::de::Error::custom(format!("bad flag {other:?}"))),
    }
}

fn flag_out<S: serde::Serializer>(b: &bool, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u8(*b as u8)
}

/// Directed road segment between node indices.
#[derive(Clone, Debug, PartialEq)]
pub struct AccessEdge {
    pub u: usize,
    pub v: usize,
    pub length: f64,
    pub speed: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Facility {
    pub node: usize,
    pub kind: FacilityKind,
}

#[derive(Clone, Debug)]
pub struct AccessGraph {
    pub nodes: Vec<AccessNode>,
    pub edges: Vec<AccessEdge>,
    pub facilities: Vec<Facility>,
    out: Vec<Vec<usize>>,
    inc: Vec<Vec<usize>>,
}

#[derive(Deserialize)]
struct EdgeRow {
    u: String,
    v: String,
    length_m: f64,
    speed_mps: f64,
}

#[derive(Deserialize)]
struct FacilityRow {
    node_id: String,
    kind: FacilityKind,
}

impl AccessGraph {
    pub fn new(
        nodes: Vec<AccessNode>,
        edges: Vec<AccessEdge>,
        facilities: Vec<Facility>,
    ) -> Result<AccessGraph, AccessError> {
        let n = nodes.len();
        let mut seen = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if !(node.x.is_finite() && node.y.is_finite()) {
                return Err(AccessError::Graph(format!("node {} has non-finite coordinates", node.id)));
            }
            if seen.insert(node.id.as_str(), i).is_some() {
                return Err(AccessError::Graph(format!("duplicate node id {}", node.id)));
            }
        }
        let mut out = vec![Vec::new(); n];
        let mut inc = vec![Vec::new(); n];
        for (k, e) in edges.iter().enumerate() {
            if e.u >= n || e.v >= n {
                return Err(AccessError::Graph(format!("edge {k} references a missing node")));
            }
            if !(e.speed > 0.0 && e.speed.is_finite()) {
                return Err(AccessError::Graph(format!("edge {k} has non-positive speed")));
            }
            if !(e.length >= 0.0 && e.length.is_finite()) {
                return Err(AccessError::Graph(format!("edge {k} has invalid length")));
            }
            out[e.u].push(k);
            inc[e.v].push(k);
        }
        if let Some(f) = facilities.iter().find(|f| f.node >= n) {
            return Err(AccessError::Graph(format!("facility at missing node {}", f.node)));
        }
        Ok(AccessGraph {
            nodes,
            edges,
            facilities,
            out,
            inc,
        })
    }

    /// Read `nodes.csv`, `edges.csv` and `facilities.csv` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<AccessGraph, AccessError> {
        let open = |name: &str| {
            let p = dir.join(name);
            csv::Reader::from_path(&p).map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(source) => AccessError::Read {
                    path: p.display().to_string(),
                    source,
                },
                other => AccessError::Graph(format!("{}: {other:?}", p.display())),
            })
        };
        let nodes: Vec<AccessNode> = open("nodes.csv")?.deserialize().collect::<Result<_, _>>()?;
        let index: HashMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| AccessError::Graph(format!("unknown node id {id}")))
        };
        let mut edges = Vec::new();
        for row in open("edges.csv")?.deserialize::<EdgeRow>() {
            let r = row?;
            edges.push(AccessEdge {
                u: lookup(&r.u)?,
                v: lookup(&r.v)?,
                length: r.length_m,
                speed: r.speed_mps,
            });
        }
        let mut facilities = Vec::new();
        for row in open("facilities.csv")?.deserialize::<FacilityRow>() {
            let r = row?;
            facilities.push(Facility {
                node: lookup(&r.node_id)?,
                kind: r.kind,
            });
        }
        AccessGraph::new(nodes, edges, facilities)
    }

    pub fn has_kind(&self, kind: FacilityKind) -> bool {
        self.facilities.iter().any(|f| f.kind == kind)
    }
}

/// Signalized nodes other than `v` within distance `r` (closed ball),
/// divided by `π r²`.
pub fn intersection_density(graph: &AccessGraph, r: f64) -> Vec<f64> {
    assert!(r > 0.0, "radius must be positive");
    let grid = SpatialGrid::new(
        graph
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.signalized)
            .map(|(i, n)| (i, n.x, n.y)),
        r,
    );
    let area = PI * r * r;
    graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let mut count = 0usize;
            grid.for_each_near(n.x, n.y, 1, |j, x, y| {
                if j != i && (x - n.x).hypot(y - n.y) <= r {
                    count += 1;
                }
            });
            count as f64 / area
        })
        .collect()
}

/// `D = α (I_u + I_v) / 2`.
pub fn edge_delay(i_u: f64, i_v: f64, alpha: f64) -> f64 {
    alpha * (i_u + i_v) / 2.0
}

/// Density radius used for edge delays, meters.
pub const DENSITY_RADIUS_M: f64 = 800.0;

/// Adjusted time from (EMS) or to (hospital) the nearest facility of `kind`.
/// Unreachable nodes get `+∞`.
pub fn adjusted_times(graph: &AccessGraph, alpha: f64, kind: FacilityKind) -> Result<Vec<f64>, AccessError> {
    let density = intersection_density(graph, DENSITY_RADIUS_M);
    let cost: Vec<f64> = graph
        .edges
        .iter()
        .map(|e| e.length / e.speed + edge_delay(density[e.u], density[e.v], alpha))
        .collect();
    let sources: Vec<usize> = graph
        .facilities
        .iter()
        .filter(|f| f.kind == kind)
        .map(|f| f.node)
        .collect();
    if sources.is_empty() {
        return Err(AccessError::NoFacilities(kind));
    }
    Ok(multi_source_dijkstra(graph, &cost, &sources, kind == FacilityKind::Hospital))
}

#[derive(PartialEq)]
struct Key(f64);
impl Eq for Key {}
impl PartialOrd for Key {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Key {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&o.0)
    }
}

/// Shortest time from any source, following edges forward, or backward
/// (time *to* the nearest source) with `reverse`.
pub fn multi_source_dijkstra(graph: &AccessGraph, cost: &[f64], sources: &[usize], reverse: bool) -> Vec<f64> {
    let n = graph.nodes.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    for &s in sources {
        dist[s] = 0.0;
        heap.push(Reverse((Key(0.0), s)));
    }
    while let Some(Reverse((Key(d), u))) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        let adj = if reverse { &graph.inc[u] } else { &graph.out[u] };
        for &k in adj {
            let e = &graph.edges[k];
            let w = if reverse { e.u } else { e.v };
            let nd = d + cost[k];
            if nd < dist[w] {
                dist[w] = nd;
                heap.push(Reverse((Key(nd), w)));
            }
        }
    }
    dist
}

/// Uniform bucket grid for radius queries.
struct SpatialGrid {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<(usize, f64, f64)>>,
}

impl SpatialGrid {
    fn new(points: impl Iterator<Item = (usize, f64, f64)>, cell: f64) -> SpatialGrid {
        let mut buckets: HashMap<(i64, i64), Vec<(usize, f64, f64)>> = HashMap::new();
        for (i, x, y) in points {
            buckets
                .entry(((x / cell).floor() as i64, (y / cell).floor() as i64))
                .or_default()
                .push((i, x, y));
        }
        SpatialGrid { cell, buckets }
    }

    fn key(&self, x: f64, y: f64) -> (i64, i64) {
        ((x / self.cell).floor() as i64, (y / self.cell).floor() as i64)
    }

    /// Visit points in cells within `rings` of the cell holding `(x, y)`.
    fn for_each_near(&self, x: f64, y: f64, rings: i64, mut f: impl FnMut(usize, f64, f64)) {
        let (cx, cy) = self.key(x, y);
        for gx in cx - rings..=cx + rings {
            for gy in cy - rings..=cy + rings {
                if let Some(b) = self.buckets.get(&(gx, gy)) {
                    b.iter().for_each(|&(i, px, py)| f(i, px, py));
                }
            }
        }
    }

    /// Visit points in the square ring at Chebyshev cell distance `k`.
    fn for_each_ring(&self, x: f64, y: f64, k: i64, mut f: impl FnMut(usize, f64, f64)) {
        let (cx, cy) = self.key(x, y);
        for gx in cx - k..=cx + k {
            for gy in cy - k..=cy + k {
                if (gx - cx).abs() != k && (gy - cy).abs() != k {
                    continue;
                }
                if let Some(b) = self.buckets.get(&(gx, gy)) {
                    b.iter().for_each(|&(i, px, py)| f(i, px, py));
                }
            }
        }
    }
}

pub type Point = (f64, f64);

/// Shoelace area (absolute).
pub fn polygon_area(poly: &[Point]) -> f64 {
    signed_area(poly).abs()
}

fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        s += x0 * y1 - x1 * y0;
    }
    s / 2.0
}

/// Keep the part of `poly` where `a x + b y <= c`.
fn clip_half_plane(poly: &[Point], a: f64, b: f64, c: f64) -> Vec<Point> {
    let inside = |p: &Point| a * p.0 + b * p.1 <= c;
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        let (pi, qi) = (inside(&p), inside(&q));
        if pi {
            out.push(p);
        }
        if pi != qi {
            let fp = a * p.0 + b * p.1 - c;
            let fq = a * q.0 + b * q.1 - c;
            let t = fp / (fp - fq);
            out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
        }
    }
    out
}

/// Intersect any simple polygon with a convex one (counter-clockwise).
pub fn clip_to_convex(subject: &[Point], convex: &[Point]) -> Vec<Point> {
    let mut out = subject.to_vec();
    let n = convex.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (x0, y0) = convex[i];
        let (x1, y1) = convex[(i + 1) % n];
        // inside is to the left of the directed edge
        let (a, b) = (y1 - y0, -(x1 - x0));
        out = clip_half_plane(&out, a, b, a * x0 + b * y0);
    }
    out
}

/// Voronoi cell of `site` (index into `sites`) inside the convex `bounds`.
fn voronoi_cell(site: usize, sites: &[Point], grid: &SpatialGrid, bounds: &[Point]) -> Vec<Point> {
    let (sx, sy) = sites[site];
    let mut cell = bounds.to_vec();
    let radius = |cell: &[Point]| {
        cell.iter()
            .map(|&(x, y)| (x - sx).hypot(y - sy))
            .fold(0.0, f64::max)
    };
    let max_ring = {
        let r = radius(&cell);
        (r * 2.0 / grid.cell).ceil() as i64 + 1
    };
    let mut k = 0;
    while k <= max_ring {
        let mut cut = |j: usize, x: f64, y: f64| {
            if j == site {
                return;
            }
            // points closer to (x, y) than to the site: bisector half-plane
            let (a, b) = (x - sx, y - sy);
            let c = (x * x + y * y - sx * sx - sy * sy) / 2.0;
            cell = clip_half_plane(&cell, a, b, c);
        };
        grid.for_each_ring(sx, sy, k, &mut cut);
        // every point beyond ring k is at least k * cell away
        if (k as f64) * grid.cell > 2.0 * radius(&cell) {
            break;
        }
        k += 1;
    }
    cell
}

/// A census tract with its population and area.
#[derive(Clone, Debug, PartialEq)]
pub struct Tract {
    /// Outer ring, any orientation, without the closing vertex.
    pub polygon: Vec<Point>,
    pub population: f64,
    pub area: f64,
}

impl Tract {
    pub fn new(mut polygon: Vec<Point>, population: f64, area: Option<f64>) -> Result<Tract, String> {
        if polygon.len() > 1 && polygon.first() == polygon.last() {
            polygon.pop();
        }
        if polygon.len() < 3 {
            return Err("fewer than three vertices".into());
        }
        if !(population >= 0.0 && population.is_finite()) {
            return Err("population must be non-negative".into());
        }
        let area = area.unwrap_or_else(|| polygon_area(&polygon));
        if !(area > 0.0 && area.is_finite()) {
            return Err("area must be positive".into());
        }
        Ok(Tract {
            polygon,
            population,
            area,
        })
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        bbox(&self.polygon)
    }
}

fn bbox(poly: &[Point]) -> (f64, f64, f64, f64) {
    poly.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
    )
}

/// Read Polygon / MultiPolygon features with a `population` property.
/// `livable_area_m2` or `area_m2` override the polygon's own area.
pub fn load_tracts(path: &Path) -> Result<Vec<Tract>, AccessError> {
    let text = std::fs::read_to_string(path).map_err(|source| AccessError::Read {
        path: path.display().to_string(),
        source,
    })?;
    let doc: serde_json::Value = serde_json::from_str(&text)?;
    let features = doc["features"]
        .as_array()
        .ok_or_else(|| AccessError::Tract {
            index: 0,
            reason: "not a FeatureCollection".into(),
        })?;
    let ring = |v: &serde_json::Value| -> Option<Vec<Point>> {
        v.as_array()?
            .iter()
            .map(|p| Some((p.get(0)?.as_f64()?, p.get(1)?.as_f64()?)))
            .collect()
    };
    let mut out = Vec::new();
    for (index, f) in features.iter().enumerate() {
        let bad = |reason: String| AccessError::Tract { index, reason };
        let props = &f["properties"];
        let population = props["population"]
            .as_f64()
            .ok_or_else(|| bad("missing population".into()))?;
        let area = props["livable_area_m2"].as_f64().or(props["area_m2"].as_f64());
        let geom = &f["geometry"];
        let polys: Vec<&serde_json::Value> = match geom["type"].as_str() {
            Some("Polygon") => vec![&geom["coordinates"]],
            Some("MultiPolygon") => geom["coordinates"]
                .as_array()
                .map(|a| a.iter().collect())
                .unwrap_or_default(),
            other => return Err(bad(format!("unsupported geometry {other:?}"))),
        };
        let rings: Vec<Vec<Point>> = polys
            .iter()
            .map(|p| p.get(0).and_then(ring).ok_or_else(|| bad("malformed ring".into())))
            .collect::<Result<_, _>>()?;
        // split population over parts by area
        let total: f64 = rings.iter().map(|r| polygon_area(r)).sum();
        for r in rings {
            let share = polygon_area(&r) / total;
            let t = Tract::new(r, population * share, area.map(|a| a * share)).map_err(&bad)?;
            out.push(t);
        }
    }
    Ok(out)
}

/// `P(v) = Σ_c |R(v) ∩ c| · P(c) / L(c)` with `R(v)` the Voronoi cell of `v`.
pub fn assign_population(graph: &AccessGraph, tracts: &[Tract]) -> Result<Vec<f64>, AccessError> {
    let sites: Vec<Point> = graph.nodes.iter().map(|n| (n.x, n.y)).collect();
    let n = sites.len();
    if n == 0 {
        return Err(AccessError::Graph("no nodes".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sites[a].0.total_cmp(&sites[b].0).then(sites[a].1.total_cmp(&sites[b].1)));
    for w in order.windows(2) {
        if sites[w[0]] == sites[w[1]] {
            return Err(AccessError::DuplicateCoordinates(
                graph.nodes[w[0]].id.clone(),
                graph.nodes[w[1]].id.clone(),
            ));
        }
    }
    for (index, t) in tracts.iter().enumerate() {
        if t.polygon.len() < 3 {
            return Err(AccessError::Tract {
                index,
                reason: "fewer than three vertices".into(),
            });
        }
    }
    // bounds: box around every site and tract, padded
    let all: Vec<Point> = sites
        .iter()
        .copied()
        .chain(tracts.iter().flat_map(|t| t.polygon.iter().copied()))
        .collect();
    let (x0, y0, x1, y1) = bbox(&all);
    let pad = ((x1 - x0).max(y1 - y0)).max(1.0);
    let bounds = vec![
        (x0 - pad, y0 - pad),
        (x1 + pad, y0 - pad),
        (x1 + pad, y1 + pad),
        (x0 - pad, y1 + pad),
    ];
    let spacing = ((x1 - x0) * (y1 - y0) / n as f64).sqrt().max(pad / 64.0).max(1e-6);
    let grid = SpatialGrid::new(sites.iter().enumerate().map(|(i, &(x, y))| (i, x, y)), spacing);
    let tract_boxes: Vec<_> = tracts.iter().map(Tract::bbox).collect();

    let mut pop = vec![0.0; n];
    for v in 0..n {
        let cell = voronoi_cell(v, &sites, &grid, &bounds);
        let cb = bbox(&cell);
        for (t, tb) in tracts.iter().zip(&tract_boxes) {
            if tb.0 > cb.2 || tb.2 < cb.0 || tb.1 > cb.3 || tb.3 < cb.1 {
                continue;
            }
            let part = clip_to_convex(&t.polygon, &cell);
            pop[v] += polygon_area(&part) * t.population / t.area;
        }
    }
    Ok(pop)
}

/// Population share within each `τ`.
pub fn coverage_curve(times: &[f64], pop: &[f64], taus: &[f64]) -> Result<Vec<f64>, AccessError> {
    if taus.windows(2).any(|w| w[1] < w[0]) {
        return Err(AccessError::UnsortedTaus);
    }
    let total: f64 = pop.iter().sum();
    if total <= 0.0 {
        return Err(AccessError::ZeroPopulation);
    }
    let mut by_time: Vec<(f64, f64)> = times.iter().copied().zip(pop.iter().copied()).collect();
    by_time.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::with_capacity(taus.len());
    let (mut i, mut acc) = (0, 0.0);
    for &tau in taus {
        while i < by_time.len() && by_time[i].0 <= tau {
            acc += by_time[i].1;
            i += 1;
        }
        // every node counted: exactly 1 regardless of summation order
        out.push(if i == by_time.len() { 1.0 } else { (acc / total).min(1.0) });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VulnerableNode {
    pub node: usize,
    pub node_id: String,
    pub t_s: f64,
    pub population: f64,
    /// Index into [`VulnerabilityReport::components`].
    pub component: usize,
}

/// A connected group of vulnerable nodes (edges taken as undirected).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Component {
    pub nodes: Vec<usize>,
    pub population: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VulnerabilityReport {
    pub tau_s: f64,
    pub rows: Vec<VulnerableNode>,
    pub underserved: f64,
    pub components: Vec<Component>,
}

/// Nodes with `T′ > τ` plus their connected clusters.
pub fn vulnerability_report(graph: &AccessGraph, times: &[f64], pop: &[f64], tau: f64) -> VulnerabilityReport {
    let n = graph.nodes.len();
    let flagged: Vec<bool> = times.iter().map(|&t| t > tau).collect();
    let mut comp = vec![usize::MAX; n];
    let mut components = Vec::new();
    for s in 0..n {
        if !flagged[s] || comp[s] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut stack = vec![s];
        comp[s] = id;
        let mut members = Vec::new();
        while let Some(u) = stack.pop() {
            members.push(u);
            for &k in graph.out[u].iter().chain(&graph.inc[u]) {
                let e = &graph.edges[k];
                let w = if e.u == u { e.v } else { e.u };
                if flagged[w] && comp[w] == usize::MAX {
                    comp[w] = id;
                    stack.push(w);
                }
            }
        }
        members.sort_unstable();
        let population = members.iter().map(|&v| pop[v]).sum();
        components.push(Component {
            nodes: members,
            population,
        });
    }
    let rows: Vec<VulnerableNode> = (0..n)
        .filter(|&v| flagged[v])
        .map(|v| VulnerableNode {
            node: v,
            node_id: graph.nodes[v].id.clone(),
            t_s: times[v],
            population: pop[v],
            component: comp[v],
        })
        .collect();
    VulnerabilityReport {
        tau_s: tau,
        underserved: rows.iter().map(|r| r.population).sum(),
        rows,
        components,
    }
}

/// Everything `access run` produces.
#[derive(Clone, Debug)]
pub struct AccessResult {
    pub kinds: Vec<FacilityKind>,
    /// Per kind, per node.
    pub times: Vec<Vec<f64>>,
    pub population: Vec<f64>,
    pub taus: Vec<f64>,
    /// Per kind, per tau.
    pub coverage: Vec<Vec<f64>>,
    pub reports: Vec<VulnerabilityReport>,
    /// Population came from tracts rather than unit weights.
    pub from_tracts: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccessParams {
    pub alpha: f64,
    pub tau: f64,
    pub taus: Vec<f64>,
}

impl AccessParams {
    /// Coverage evaluated every 30 s up to 30 minutes.
    pub fn new(alpha: f64, tau: f64) -> AccessParams {
        AccessParams {
            alpha,
            tau,
            taus: (0..=60).map(|i| i as f64 * 30.0).collect(),
        }
    }
}

/// Run the analysis on a graph directory. Without `tracts.geojson` every
/// node carries unit population.
pub fn run_access(dir: &Path, params: &AccessParams) -> Result<(AccessGraph, AccessResult), AccessError> {
    let graph = AccessGraph::load_dir(dir)?;
    let tract_path = dir.join("tracts.geojson");
    let (population, from_tracts) = if tract_path.exists() {
        (assign_population(&graph, &load_tracts(&tract_path)?)?, true)
    } else {
        (vec![1.0; graph.nodes.len()], false)
    };
    let kinds: Vec<FacilityKind> = FacilityKind::ALL.into_iter().filter(|k| graph.has_kind(*k)).collect();
    if kinds.is_empty() {
        return Err(AccessError::NoFacilities(FacilityKind::Ems));
    }
    let mut times = Vec::new();
    let mut coverage = Vec::new();
    let mut reports = Vec::new();
    for &k in &kinds {
        let t = adjusted_times(&graph, params.alpha, k)?;
        coverage.push(coverage_curve(&t, &population, &params.taus)?);
        reports.push(vulnerability_report(&graph, &t, &population, params.tau));
        times.push(t);
    }
    Ok((
        graph,
        AccessResult {
            kinds,
            times,
            population,
            taus: params.taus.clone(),
            coverage,
            reports,
            from_tracts,
        },
    ))
}

fn fmt_time(t: f64) -> String {
    if t.is_finite() {
        format!("{t:.3}")
    } else {
        "inf".into()
    }
}

/// Write `node_times.csv`, `coverage_curve.csv` and `vulnerable.csv`.
pub fn write_access_outputs(graph: &AccessGraph, res: &AccessResult, out: &Path) -> Result<(), AccessError> {
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("node_times.csv"))?;
    let mut header = vec!["node_id".to_string()];
    header.extend(res.kinds.iter().map(|k| format!("t_{}_s", k.label())));
    header.push("population".into());
    w.write_record(&header)?;
    for (v, node) in graph.nodes.iter().enumerate() {
        let mut rec = vec![node.id.clone()];
        rec.extend(res.times.iter().map(|t| fmt_time(t[v])));
        rec.push(format!("{:.6}", res.population[v]));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("coverage_curve.csv"))?;
    let mut header = vec!["tau_s".to_string()];
    header.extend(res.kinds.iter().map(|k| k.label().to_string()));
    w.write_record(&header)?;
    for (i, tau) in res.taus.iter().enumerate() {
        let mut rec = vec![format!("{tau}")];
        rec.extend(res.coverage.iter().map(|c| format!("{:.6}", c[i])));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("vulnerable.csv"))?;
    w.write_record(["kind", "node_id", "t_s", "population", "component", "component_population"])?;
    for (k, rep) in res.kinds.iter().zip(&res.reports) {
        for r in &rep.rows {
            w.write_record([
                k.label().to_string(),
                r.node_id.clone(),
                fmt_time(r.t_s),
                format!("{:.6}", r.population),
                r.component.to_string(),
                format!("{:.6}", rep.components[r.component].population),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One controller/router pairing for the transit experiment.
pub struct TransitArm {
    pub label: String,
    pub controller: Box<dyn SignalController + Send>,
    pub router: Box<dyn EmvRouter + Send>,
    /// Annotation carried to the output, e.g. an untrained policy.
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransitSummary {
    pub label: String,
    pub runs: usize,
    pub traversals: usize,
    pub mean_s: f64,
    pub std_s: f64,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TransitExperiment {
    pub rows: Vec<TransitSummary>,
    /// Per arm, every measured traversal in run order.
    pub samples: Vec<Vec<f64>>,
    /// `mean(arm) / mean(reference)` for every arm.
    pub alpha_scaling: Vec<f64>,
    pub reference: String,
}

/// Nodes with a neighbor on all four arms.
pub fn interior_nodes(net: &TrafficNetwork) -> Vec<usize> {
    net.intersections
        .iter()
        .filter(|ix| ix.arm_neighbor.iter().all(Option::is_some))
        .map(|ix| ix.node)
        .collect()
}

/// Measure EMV transit times through the ±window around interior
/// intersections under each arm over the given episodes. The delay-factor
/// scaling is reported relative to the arm labelled `reference`.
pub fn emvlight_alpha_experiment(
    net: &TrafficNetwork,
    episodes: &[EpisodeSpec],
    arms: &mut [TransitArm],
    reference: &str,
) -> Result<TransitExperiment, AccessError> {
    let inner = interior_nodes(net);
    let mut rows = Vec::new();
    let mut samples = Vec::new();
    for arm in arms.iter_mut() {
        let mut xs = Vec::new();
        for spec in episodes {
            let m = run_episode(net, spec, arm.controller.as_mut(), arm.router.as_mut())?;
            xs.extend(m.transits.iter().filter(|t| inner.contains(&t.node)).map(|t| t.seconds));
        }
        let n = xs.len();
        let mean = if n > 0 { xs.iter().sum::<f64>() / n as f64 } else { f64::NAN };
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            f64::NAN
        };
        rows.push(TransitSummary {
            label: arm.label.clone(),
            runs: episodes.len(),
            traversals: n,
            mean_s: mean,
            std_s: std,
            warning: arm.warning.clone(),
        });
        samples.push(xs);
    }
    let base = rows
        .iter()
        .find(|r| r.label == reference)
        .map(|r| r.mean_s)
        .unwrap_or(f64::NAN);
    Ok(TransitExperiment {
        alpha_scaling: rows.iter().map(|r| r.mean_s / base).collect(),
        rows,
        samples,
        reference: reference.to_string(),
    })
}

impl TransitExperiment {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<24} {:>5} {:>6} {:>16} {:>8}\n", "controller", "runs", "n", "transit (s)", "ratio");
        for (r, a) in self.rows.iter().zip(&self.alpha_scaling) {
            s.push_str(&format!(
                "{:<24} {:>5} {:>6} {:>8.2} ± {:<5.2} {:>8.3}{}\n",
                r.label,
                r.runs,
                r.traversals,
                r.mean_s,
                r.std_s,
                a,
                r.warning.as_deref().map(|w| format!("  [{w}]")).unwrap_or_default()
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, x: f64, y: f64, sig: bool) -> AccessNode {
        AccessNode {
            id: id.into(),
            x,
            y,
            signalized: sig,
        }
    }

    #[test]
    fn density_counts_closed_ball_excluding_self() {
        let mut nodes = vec![node("c", 0.0, 0.0, true)];
        for (i, a) in [0.0f64, 1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            nodes.push(node(&format!("n{i}"), 800.0 * a.cos(), 800.0 * a.sin(), true));
        }
        nodes.push(node("far", 801.0, 0.0, true));
        nodes.push(node("plain", 10.0, 0.0, false));
        let g = AccessGraph::new(nodes, vec![], vec![]).unwrap();
        let d = intersection_density(&g, 800.0);
        assert!((d[0] - 5.0 / (PI * 640_000.0)).abs() < 1e-18);
        assert!((d[0] - 2.487e-6).abs() < 1e-9);
    }

    #[test]
    fn isolated_node_has_zero_density() {
        let g = AccessGraph::new(vec![node("a", 0.0, 0.0, true)], vec![], vec![]).unwrap();
        assert_eq!(intersection_density(&g, 800.0), vec![0.0]);
    }

    #[test]
    fn edge_delay_is_linear() {
        assert_eq!(edge_delay(1.0, 3.0, 0.0), 0.0);
        let d = edge_delay(2.487e-6, 2.487e-6, 15.0);
        assert!((d - 3.7305e-5).abs() < 1e-9);
        assert_eq!(edge_delay(1.0, 3.0, 10.0), 2.0 * edge_delay(1.0, 3.0, 5.0));
    }

    #[test]
    fn line_times_at_default_speed() {
        let v = 11.176;
        let g = AccessGraph::new(
            vec![node("a", 0.0, 0.0, false), node("b", 500.0, 0.0, false), node("c", 1000.0, 0.0, false)],
            vec![
                AccessEdge { u: 0, v: 1, length: 500.0, speed: v },
                AccessEdge { u: 1, v: 2, length: 500.0, speed: v },
            ],
            vec![Facility { node: 0, kind: FacilityKind::Ems }],
        )
        .unwrap();
        let t = adjusted_times(&g, 0.0, FacilityKind::Ems).unwrap();
        assert_eq!(t[0], 0.0);
        assert!((t[2] - 89.48).abs() < 0.01, "{}", t[2]);
        assert!(matches!(
            adjusted_times(&g, 0.0, FacilityKind::Hospital),
            Err(AccessError::NoFacilities(FacilityKind::Hospital))
        ));
    }

    #[test]
    fn single_node_takes_whole_tract() {
        let g = AccessGraph::new(vec![node("a", 3.0, 4.0, false)], vec![], vec![]).unwrap();
        let t = Tract::new(vec![(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)], 100.0, None).unwrap();
        let p = assign_population(&g, &[t]).unwrap();
        assert!((p[0] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn symmetric_nodes_split_evenly() {
        let g = AccessGraph::new(vec![node("a", 2.0, 5.0, false), node("b", 8.0, 5.0, false)], vec![], vec![]).unwrap();
        let t = Tract::new(vec![(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)], 100.0, None).unwrap();
        let p = assign_population(&g, &[t]).unwrap();
        assert!((p[0] - 50.0).abs() < 1e-9 && (p[1] - 50.0).abs() < 1e-9);
    }

    #[test]
    fn duplicate_coordinates_rejected() {
        let g = AccessGraph::new(vec![node("a", 1.0, 1.0, false), node("b", 1.0, 1.0, false)], vec![], vec![]).unwrap();
        let t = Tract::new(vec![(0.0, 0.0), (2.0, 0.0), (2.0, 2.0)], 1.0, None).unwrap();
        assert!(matches!(assign_population(&g, &[t]), Err(AccessError::DuplicateCoordinates(a, b)) if a == "a" && b == "b"));
    }

    #[test]
    fn coverage_edges() {
        let c = coverage_curve(&[0.0, 50.0, 300.0], &[1.0, 2.0, 1.0], &[0.0, 10.0, 100.0, f64::INFINITY]).unwrap();
        assert_eq!(c, vec![0.25, 0.25, 0.75, 1.0]);
        assert!(matches!(coverage_curve(&[0.0], &[0.0], &[1.0]), Err(AccessError::ZeroPopulation)));
        assert!(matches!(coverage_curve(&[0.0], &[1.0], &[2.0, 1.0]), Err(AccessError::UnsortedTaus)));
    }

    #[test]
    fn vulnerability_filters_and_groups() {
        let g = AccessGraph::new(
            vec![node("a", 0.0, 0.0, false), node("b", 1.0, 0.0, false), node("c", 2.0, 0.0, false)],
            vec![AccessEdge { u: 1, v: 2, length: 1.0, speed: 1.0 }],
            vec![],
        )
        .unwrap();
        let r = vulnerability_report(&g, &[10.0, 500.0, 600.0], &[1.0, 10.0, 5.0], 240.0);
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.underserved, 15.0);
        assert_eq!(r.components.len(), 1);
        assert_eq!(r.components[0].nodes, vec![1, 2]);
        let none = vulnerability_report(&g, &[1.0, 2.0, 3.0], &[1.0; 3], 240.0);
        assert!(none.rows.is_empty() && none.underserved == 0.0);
    }

    #[test]
    fn clip_square_by_triangle() {
        let sq = vec![(0.0, 0.0), (2.0, 0.0), (2.0, 2.0), (0.0, 2.0)];
        let tri = vec![(0.0, 0.0), (2.0, 0.0), (0.0, 2.0)];
        assert!((polygon_area(&clip_to_convex(&sq, &tri)) - 2.0).abs() < 1e-12);
    }
}
