//! Reference implementations and fixtures shared by the integration tests.
//! The oracles are deliberately naive: they follow the textbook procedure
//! step by step and trade speed for obviousness.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use transit_energy::geo::{point_to_polyline_distance, GeoPoint};
use transit_energy::road_network::{OsmFeature, RoutingGraph};
use transit_energy::synth::{write_fleet_fixture, FleetFixture, FleetSpec};

/// Frequency-vote matching written as the plain triple loop: for every
/// location, for every nearby road, count its occurrences in every list of
/// the clipped window. Ties: higher count, then smaller mean distance over
/// the window, then smaller feature id.
pub fn literal_vote_matcher(
    locations: &[GeoPoint],
    features: &[OsmFeature],
    window: usize,
    radius: f64,
) -> Vec<Option<usize>> {
    let nearby_roads: Vec<Vec<(usize, f64)>> = locations
        .iter()
        .map(|p| {
            let mut list: Vec<(usize, f64)> = features
                .iter()
                .enumerate()
                .map(|(f, feat)| (f, point_to_polyline_distance(*p, &feat.polyline)))
                .filter(|&(_, d)| d <= radius)
                .collect();
            list.sort_by(|a, b| a.1.total_cmp(&b.1).then(features[a.0].feature_id.cmp(&features[b.0].feature_id)));
            list
        })
        .collect();
    let n = locations.len();
    let mut roads = Vec::with_capacity(n);
    for i in 0..n {
        if nearby_roads[i].is_empty() {
            roads.push(None);
            continue;
        }
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(n - 1);
        let mut best: Option<(usize, f64, usize)> = None;
        for &(road, _) in &nearby_roads[i] {
            let mut count = 0usize;
            let mut dist_sum = 0.0;
            let mut dist_n = 0usize;
            for list in &nearby_roads[lo..=hi] {
                for &(other, d) in list {
                    if other == road {
                        count += 1;
                        dist_sum += d;
                        dist_n += 1;
                    }
                }
            }
            let mean = dist_sum / dist_n as f64;
            let better = match best {
                None => true,
                Some((c, m, f)) => {
                    count > c
                        || (count == c && mean < m)
                        || (count == c && mean == m && features[road].feature_id < features[f].feature_id)
                }
            };
            if better {
                best = Some((count, mean, road));
            }
        }
        roads.push(best.map(|b| b.2));
    }
    roads
}

/// Arc-length coordinate of the point on a planar polyline closest to `p`.
pub fn arc_length_coordinate(polyline: &[(f64, f64)], p: (f64, f64)) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    let mut walked = 0.0;
    for w in polyline.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = dx.hypot(dy);
        let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (len * len)).clamp(0.0, 1.0);
        let d = (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy);
        if d < best.0 {
            best = (d, walked + t * len);
        }
        walked += len;
    }
    best.1
}

/// A simple path found by exhaustive search.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedPath {
    pub nodes: Vec<usize>,
    pub edges: Vec<usize>,
    pub length: f64,
}

/// Every simple path from `from` to `to`, by depth-first enumeration.
pub fn all_simple_paths(g: &RoutingGraph, from: usize, to: usize) -> Vec<EnumeratedPath> {
    fn dfs(
        g: &RoutingGraph,
        to: usize,
        nodes: &mut Vec<usize>,
        edges: &mut Vec<usize>,
        length: f64,
        out: &mut Vec<EnumeratedPath>,
    ) {
        let cur = *nodes.last().unwrap();
        if cur == to {
            out.push(EnumeratedPath {
                nodes: nodes.clone(),
                edges: edges.clone(),
                length,
            });
            return;
        }
        for &e in g.incident(cur) {
            let next = g.other_end(e, cur);
            if nodes.contains(&next) {
                continue;
            }
            nodes.push(next);
            edges.push(e);
            dfs(g, to, nodes, edges, length + g.edges[e].length, out);
            nodes.pop();
            edges.pop();
        }
    }
    let mut out = Vec::new();
    dfs(g, to, &mut vec![from], &mut Vec::new(), 0.0, &mut out);
    out
}

/// The shortest of all simple paths; equal lengths (within a relative
/// 1e-9) go to the lexicographically smaller node sequence.
pub fn exhaustive_shortest(g: &RoutingGraph, from: usize, to: usize) -> Option<EnumeratedPath> {
    let paths = all_simple_paths(g, from, to);
    let min = paths.iter().map(|p| p.length).fold(f64::INFINITY, f64::min);
    paths
        .into_iter()
        .filter(|p| p.length <= min + 1e-9 * min.max(1.0))
        .min_by(|a, b| a.nodes.cmp(&b.nodes))
}

/// Indices of the `k` nodes nearest to `p`, by a full sort.
pub fn brute_knn(g: &RoutingGraph, p: GeoPoint, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = g
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (transit_energy::geo::haversine(p, *n), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

fn fixture_at(name: &str, spec: FleetSpec) -> FleetFixture {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    std::fs::create_dir_all(&dir).expect("create fixture dir");
    write_fleet_fixture(&dir, &spec).expect("write fleet fixture")
}

/// The default synthetic fleet, written once per test binary.
pub fn fleet() -> &'static FleetFixture {
    static FLEET: OnceLock<FleetFixture> = OnceLock::new();
    FLEET.get_or_init(|| fixture_at(&format!("fleet-{}", std::process::id()), FleetSpec::default()))
}

/// The reduced synthetic fleet, written once per test binary.
pub fn small_fleet() -> &'static FleetFixture {
    static FLEET: OnceLock<FleetFixture> = OnceLock::new();
    FLEET.get_or_init(|| fixture_at(&format!("fleet-small-{}", std::process::id()), FleetSpec::small()))
}

/// A fresh scratch directory under the cargo test temp area.
pub fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("create scratch dir");
    dir
}
