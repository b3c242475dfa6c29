//! Road network model: links, OD pairs, detectors, and shortest-path routing.
//!
//! The network is an immutable directed graph. Links are identified by their
//! index into [`NetworkSpec::links`]; routes are ordered lists of link ids.
//! Shortest paths are deterministic: ties are broken toward the
//! lexicographically smallest link-id sequence.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::microsim::SimSnapshot;

/// Default free-flow speed, m/s (50 km/h urban default).
pub const DEFAULT_FREE_FLOW_SPEED: f64 = 13.89;

/// Floor applied to snapshot mean speeds when turning them into travel-time
/// costs, so jammed links get a large finite cost instead of an infinite one.
pub const V_MIN: f64 = 0.5;

/// One directed single-lane road segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    /// Index of this link in [`NetworkSpec::links`].
    pub id: usize,
    pub from_node: u32,
    pub to_node: u32,
    /// Meters.
    pub length: f64,
    /// Meters per second; also the speed limit for vehicles on the link.
    pub free_flow_speed: f64,
    /// Always 1 in this model.
    pub lane_count: u32,
    pub has_detector: bool,
}

/// Immutable directed-graph description of the road network.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    pub nodes: Vec<u32>,
    pub links: Vec<LinkSpec>,
    /// (origin node, destination node) pairs, in fixed order.
    pub od_pairs: Vec<(u32, u32)>,
    /// Link ids carrying detectors, in fixed order.
    pub detectors: Vec<usize>,
    out_links: BTreeMap<u32, Vec<usize>>,
    in_links: BTreeMap<u32, Vec<usize>>,
}

/// Per-link travel-time estimates, seconds, indexed by link id.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeCosts(pub Vec<f64>);

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("no route from node {origin} to node {dest}")]
    NoPath { origin: u32, dest: u32 },
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("network file error: {0}")]
    Io(#[from] std::io::Error),
    #[error("network file parse error: {0}")]
    Parse(String),
}

impl NetworkSpec {
    /// Validates the parts and builds adjacency. All other constructors and
    /// the file loader funnel through here.
    pub fn new(
        links: Vec<LinkSpec>,
        od_pairs: Vec<(u32, u32)>,
        detectors: Vec<usize>,
    ) -> Result<Self, NetworkError> {
        let mut nodes: Vec<u32> = Vec::new();
        for (i, link) in links.iter().enumerate() {
            if link.id != i {
                return Err(NetworkError::Invalid(format!(
                    "link at position {i} has id {}; ids must equal positions",
                    link.id
                )));
            }
            if link.from_node == link.to_node {
                return Err(NetworkError::Invalid(format!("link {i} is a self-loop")));
            }
            if !(link.length > 0.0) || !link.length.is_finite() {
                return Err(NetworkError::Invalid(format!("link {i} has non-positive length")));
            }
            if !(link.free_flow_speed > 0.0) || !link.free_flow_speed.is_finite() {
                return Err(NetworkError::Invalid(format!("link {i} has non-positive speed")));
            }
            if link.lane_count != 1 {
                return Err(NetworkError::Invalid(format!(
                    "link {i} has lane_count {}; only single-lane links are supported",
                    link.lane_count
                )));
            }
            nodes.push(link.from_node);
            nodes.push(link.to_node);
        }
        nodes.sort_unstable();
        nodes.dedup();

        let mut out_links: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut in_links: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for link in &links {
            out_links.entry(link.from_node).or_default().push(link.id);
            in_links.entry(link.to_node).or_default().push(link.id);
        }

        let mut seen = std::collections::BTreeSet::new();
        for &d in &detectors {
            if d >= links.len() {
                return Err(NetworkError::Invalid(format!("detector references unknown link {d}")));
            }
            if !seen.insert(d) {
                return Err(NetworkError::Invalid(format!("duplicate detector on link {d}")));
            }
        }

        for &(o, d) in &od_pairs {
            if !out_links.contains_key(&o) {
                return Err(NetworkError::Invalid(format!("OD origin {o} has no outgoing link")));
            }
            if !in_links.contains_key(&d) {
                return Err(NetworkError::Invalid(format!("OD destination {d} has no incoming link")));
            }
        }

        let mut links = links;
        for link in &mut links {
            link.has_detector = seen.contains(&link.id);
        }

        let spec = NetworkSpec { nodes, links, od_pairs, detectors, out_links, in_links };

        // Every destination must be reachable from its origin under any
        // positive costs; check with uniform costs once at construction.
        let uniform = EdgeCosts(vec![1.0; spec.links.len()]);
        for &(o, d) in &spec.od_pairs {
            shortest_path(&spec, &uniform, o, d)?;
        }
        Ok(spec)
    }

    /// Outgoing link ids of `node`, ascending. Empty for sink nodes.
    pub fn outgoing(&self, node: u32) -> &[usize] {
        self.out_links.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Incoming link ids of `node`, ascending. Empty for source nodes.
    pub fn incoming(&self, node: u32) -> &[usize] {
        self.in_links.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    pub fn n_detectors(&self) -> usize {
        self.detectors.len()
    }

    pub fn n_od(&self) -> usize {
        self.od_pairs.len()
    }

    /// Position of `link_id` in the detector list, if it carries one.
    pub fn detector_index(&self, link_id: usize) -> Option<usize> {
        self.detectors.iter().position(|&d| d == link_id)
    }

    /// Free-flow travel-time costs (length / free-flow speed).
    pub fn free_flow_costs(&self) -> EdgeCosts {
        EdgeCosts(self.links.iter().map(|l| l.length / l.free_flow_speed).collect())
    }
}

/// Canonical Nguyen-Dupuis links as (from, to, base cost units). Link ids are
/// positions in this table. Base length is 100 m per cost unit.
const ND_LINKS: [(u32, u32, f64); 19] = [
    (1, 5, 7.0),
    (1, 12, 9.0),
    (4, 5, 9.0),
    (4, 9, 12.0),
    (5, 6, 3.0),
    (5, 9, 9.0),
    (6, 7, 5.0),
    (6, 10, 13.0),
    (7, 8, 5.0),
    (7, 11, 9.0),
    (8, 2, 9.0),
    (9, 10, 10.0),
    (9, 13, 9.0),
    (10, 11, 6.0),
    (11, 2, 9.0),
    (11, 3, 8.0),
    (12, 6, 7.0),
    (12, 8, 14.0),
    (13, 3, 11.0),
];

/// Meters per Nguyen-Dupuis cost unit before scaling.
const ND_METERS_PER_COST: f64 = 100.0;

/// Default detector links: every approach into destinations 2 and 3 plus the
/// mid-network links of the central corridor.
const ND_DETECTORS: [(u32, u32); 9] =
    [(5, 6), (6, 7), (7, 8), (8, 2), (9, 10), (10, 11), (11, 2), (11, 3), (13, 3)];

/// Builds the 13-node / 19-link Nguyen-Dupuis network with OD pairs
/// {(1,2),(1,3),(4,2),(4,3)}, all link lengths scaled by `length_scale`,
/// and the default 9-detector set.
pub fn build_nguyen_dupuis(length_scale: f64) -> NetworkSpec {
    assert!(
        length_scale > 0.0 && length_scale.is_finite(),
        "length_scale must be positive"
    );
    let links: Vec<LinkSpec> = ND_LINKS
        .iter()
        .enumerate()
        .map(|(id, &(from, to, cost))| LinkSpec {
            id,
            from_node: from,
            to_node: to,
            length: cost * ND_METERS_PER_COST * length_scale,
            free_flow_speed: DEFAULT_FREE_FLOW_SPEED,
            lane_count: 1,
            has_detector: false,
        })
        .collect();
    let detectors = ND_DETECTORS
        .iter()
        .map(|&(from, to)| {
            links
                .iter()
                .position(|l| l.from_node == from && l.to_node == to)
                .expect("detector link present in canonical table")
        })
        .collect();
    let od_pairs = vec![(1, 2), (1, 3), (4, 2), (4, 3)];
    NetworkSpec::new(links, od_pairs, detectors).expect("canonical network is valid")
}

/// Travel-time costs from a simulator snapshot: `length / max(v_mean, V_MIN)`.
/// Empty links carry free-flow speed in the snapshot, so they cost free-flow
/// travel time.
pub fn edge_costs_from_snapshot(spec: &NetworkSpec, snapshot: &SimSnapshot) -> EdgeCosts {
    assert_eq!(
        snapshot.mean_speeds.len(),
        spec.links.len(),
        "snapshot link count must match the network"
    );
    EdgeCosts(
        spec.links
            .iter()
            .map(|l| l.length / snapshot.mean_speeds[l.id].max(V_MIN))
            .collect(),
    )
}

/// Minimum total distance from every node to `dest` under `costs`.
/// Unreachable nodes get `f64::INFINITY`. Plain Dijkstra on the reverse graph.
pub fn distances_to(spec: &NetworkSpec, costs: &EdgeCosts, dest: u32) -> BTreeMap<u32, f64> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    debug_assert_eq!(costs.0.len(), spec.links.len());
    let mut dist: BTreeMap<u32, f64> = spec.nodes.iter().map(|&n| (n, f64::INFINITY)).collect();
    let mut heap: BinaryHeap<Reverse<(OrdF64, u32)>> = BinaryHeap::new();
    dist.insert(dest, 0.0);
    heap.push(Reverse((OrdF64(0.0), dest)));
    while let Some(Reverse((OrdF64(d), node))) = heap.pop() {
        if d > dist[&node] {
            continue;
        }
        for &lid in spec.incoming(node) {
            let link = &spec.links[lid];
            let cand = d + costs.0[lid];
            if cand < dist[&link.from_node] {
                dist.insert(link.from_node, cand);
                heap.push(Reverse((OrdF64(cand), link.from_node)));
            }
        }
    }
    dist
}

/// Walks the greedy shortest route from `origin` given distances-to-dest.
/// At each node it takes the smallest-id outgoing link that stays on a
/// minimum-cost path, which yields the lexicographically smallest link-id
/// sequence among all optimal routes.
pub fn walk_route(
    spec: &NetworkSpec,
    costs: &EdgeCosts,
    dist: &BTreeMap<u32, f64>,
    origin: u32,
    dest: u32,
) -> Result<Vec<usize>, NetworkError> {
    if !dist.get(&origin).map(|d| d.is_finite()).unwrap_or(false) {
        return Err(NetworkError::NoPath { origin, dest });
    }
    let mut route = Vec::new();
    let mut node = origin;
    while node != dest {
        let here = dist[&node];
        let next = spec
            .outgoing(node)
            .iter()
            .copied()
            .find(|&lid| {
                let link = &spec.links[lid];
                costs.0[lid] + dist.get(&link.to_node).copied().unwrap_or(f64::INFINITY) == here
            })
            .expect("finite distance implies an optimal outgoing link");
        route.push(next);
        node = spec.links[next].to_node;
    }
    Ok(route)
}

/// Minimum-cost route from `origin` to `dest` as an ordered list of link ids.
pub fn shortest_path(
    spec: &NetworkSpec,
    costs: &EdgeCosts,
    origin: u32,
    dest: u32,
) -> Result<Vec<usize>, NetworkError> {
    assert_ne!(origin, dest, "origin and destination must differ");
    let dist = distances_to(spec, costs, dest);
    walk_route(spec, costs, &dist, origin, dest)
}

/// Total cost of a route.
pub fn route_cost(costs: &EdgeCosts, route: &[usize]) -> f64 {
    route.iter().map(|&l| costs.0[l]).sum()
}

/// f64 wrapper ordered by value; costs are guaranteed finite.
#[derive(PartialEq, PartialOrd)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

#[allow(clippy::derive_ord_xor_partial_ord)]
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).expect("edge costs are finite")
    }
}

// --- file format -----------------------------------------------------------

/// Serialized form of a network: a TOML document with a `links` table array
/// plus `od_pairs` and `detectors`. `NetworkSpec::new` re-validates on load,
/// so hand-edited files get the same checks as built-in networks.
#[derive(Serialize, Deserialize)]
struct NetworkFile {
    od_pairs: Vec<(u32, u32)>,
    detectors: Vec<usize>,
    links: Vec<LinkSpec>,
}

pub fn write_network(spec: &NetworkSpec, path: &Path) -> Result<(), NetworkError> {
    let file = NetworkFile {
        od_pairs: spec.od_pairs.clone(),
        detectors: spec.detectors.clone(),
        links: spec.links.clone(),
    };
    let text = toml::to_string_pretty(&file).map_err(|e| NetworkError::Parse(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_network(path: &Path) -> Result<NetworkSpec, NetworkError> {
    let text = std::fs::read_to_string(path)?;
    let file: NetworkFile = toml::from_str(&text).map_err(|e| NetworkError::Parse(e.to_string()))?;
    NetworkSpec::new(file.links, file.od_pairs, file.detectors)
}
