use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::io::Write;

use crate::error::{Error, Result};
use crate::geo::{haversine, GeoPoint};

use super::OsmFeature;

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub feature_id: String,
    pub length: f64,
}

/// Undirected multigraph whose nodes are polyline vertices (merged at equal
/// coordinates) and whose edges are polyline segments labelled with their
/// feature id.
#[derive(Debug, Clone, Default)]
pub struct RoutingGraph {
    pub nodes: Vec<GeoPoint>,
    pub edges: Vec<Edge>,
    adjacency: Vec<Vec<usize>>,
}

/// A route as a sequence of edge indices, with its node sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub nodes: Vec<usize>,
    pub edges: Vec<usize>,
    pub length: f64,
}

fn node_key(p: GeoPoint) -> (i64, i64) {
    ((p.lat * 1e7).round() as i64, (p.lon * 1e7).round() as i64)
}

impl RoutingGraph {
    pub fn from_features(features: &[OsmFeature]) -> RoutingGraph {
        let mut g = RoutingGraph::default();
        let mut lookup: HashMap<(i64, i64), usize> = HashMap::new();
        for f in features {
            let ids: Vec<usize> = f
                .polyline
                .iter()
                .map(|p| {
                    *lookup.entry(node_key(*p)).or_insert_with(|| {
                        g.nodes.push(*p);
                        g.nodes.len() - 1
                    })
                })
                .collect();
            for w in ids.windows(2) {
                let length = haversine(g.nodes[w[0]], g.nodes[w[1]]);
                if w[0] != w[1] && length > 0.0 {
                    g.edges.push(Edge {
                        a: w[0],
                        b: w[1],
                        feature_id: f.feature_id.clone(),
                        length,
                    });
                }
            }
        }
        g.rebuild_adjacency();
        g
    }

    /// Builds a graph from explicit nodes and edges. Edges must have
    /// positive length and reference existing nodes.
    pub fn from_parts(nodes: Vec<GeoPoint>, edges: Vec<Edge>) -> Result<RoutingGraph> {
        for e in &edges {
            if e.a >= nodes.len() || e.b >= nodes.len() {
                return Err(Error::InvalidInput(format!("edge {e:?} references a missing node")));
            }
            if !(e.length > 0.0) {
                return Err(Error::InvalidInput(format!("edge {e:?} has non-positive length")));
            }
        }
        let mut g = RoutingGraph {
            nodes,
            edges,
            adjacency: Vec::new(),
        };
        g.rebuild_adjacency();
        Ok(g)
    }

    fn rebuild_adjacency(&mut self) {
        self.adjacency = vec![Vec::new(); self.nodes.len()];
        for (i, e) in self.edges.iter().enumerate() {
            self.adjacency[e.a].push(i);
            if e.b != e.a {
                self.adjacency[e.b].push(i);
            }
        }
    }

    /// Edge indices incident to `node`.
    pub fn incident(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn other_end(&self, edge: usize, from: usize) -> usize {
        let e = &self.edges[edge];
        if e.a == from {
            e.b
        } else {
            e.a
        }
    }

    /// Single-source distances; unreachable nodes are `f64::INFINITY`.
    pub fn distances_from(&self, source: usize) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.nodes.len()];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(QueueItem { dist: 0.0, node: source });
        while let Some(QueueItem { dist: d, node }) = heap.pop() {
            if d > dist[node] {
                continue;
            }
            for &ei in &self.adjacency[node] {
                let next = self.other_end(ei, node);
                let nd = d + self.edges[ei].length;
                if nd < dist[next] {
                    dist[next] = nd;
                    heap.push(QueueItem { dist: nd, node: next });
                }
            }
        }
        dist
    }

    /// Debug export: `node_a,node_b,feature_id,length_m`.
    pub fn write_edges<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["node_a", "node_b", "feature_id", "length_m"])?;
        for e in &self.edges {
            w.write_record([
                e.a.to_string(),
                e.b.to_string(),
                e.feature_id.clone(),
                e.length.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<edge writer>", e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct QueueItem {
    dist: f64,
    node: usize,
}

impl Eq for QueueItem {}

impl Ord for QueueItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for QueueItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Shortest path by summed edge length. Among equally short paths the one
/// with the lexicographically smallest node sequence is returned.
pub fn shortest_path(g: &RoutingGraph, from: usize, to: usize) -> Result<Path> {
    if from >= g.nodes.len() || to >= g.nodes.len() {
        return Err(Error::InvalidInput(format!("node {from} or {to} not in graph")));
    }
    if from == to {
        return Ok(Path {
            nodes: vec![from],
            edges: Vec::new(),
            length: 0.0,
        });
    }
    let da = g.distances_from(from);
    if !da[to].is_finite() {
        return Err(Error::NoPath { from, to });
    }
    let db = g.distances_from(to);
    let total = da[to];
    let eps = 1e-9 * total.max(1.0);

    let mut nodes = vec![from];
    let mut edges = Vec::new();
    let mut length = 0.0;
    let mut cur = from;
    while cur != to {
        // Edges lying on some shortest path, smallest next node first.
        let best = g
            .incident(cur)
            .iter()
            .map(|&ei| (g.other_end(ei, cur), g.edges[ei].length, ei))
            .filter(|&(next, w, _)| length + w + db[next] <= total + eps && db[next] < db[cur])
            .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
        let Some((next, w, ei)) = best else {
            return Err(Error::Numerical(format!(
                "shortest-path reconstruction stalled at node {cur}"
            )));
        };
        nodes.push(next);
        edges.push(ei);
        length += w;
        cur = next;
        if nodes.len() > g.nodes.len() {
            return Err(Error::Numerical("shortest-path reconstruction looped".into()));
        }
    }
    Ok(Path {
        nodes,
        edges,
        length,
    })
}

/// The `k` nodes closest to `p` by great-circle distance, ties on node id.
pub fn k_nearest_nodes(g: &RoutingGraph, p: GeoPoint, k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = g
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (haversine(p, *n), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    scored.into_iter().map(|(_, i)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::LocalProjection;

    fn chain() -> RoutingGraph {
        let proj = LocalProjection::new(GeoPoint::new(35.0, -85.3));
        let nodes = vec![proj.from_xy(0.0, 0.0), proj.from_xy(100.0, 0.0), proj.from_xy(200.0, 0.0)];
        let edges = vec![
            Edge { a: 0, b: 1, feature_id: "am".into(), length: 100.0 },
            Edge { a: 1, b: 2, feature_id: "mb".into(), length: 100.0 },
        ];
        RoutingGraph::from_parts(nodes, edges).unwrap()
    }

    #[test]
    fn trivial_and_chain_paths() {
        let g = chain();
        let p = shortest_path(&g, 1, 1).unwrap();
        assert!(p.edges.is_empty());
        assert_eq!(p.length, 0.0);
        let p = shortest_path(&g, 0, 2).unwrap();
        assert_eq!(p.edges, vec![0, 1]);
        assert_eq!(p.nodes, vec![0, 1, 2]);
        assert_eq!(p.length, 200.0);
    }

    #[test]
    fn disconnected_is_no_path() {
        let mut g = chain();
        g.nodes.push(GeoPoint::new(36.0, -85.0));
        g.rebuild_adjacency();
        assert!(matches!(shortest_path(&g, 0, 3), Err(Error::NoPath { .. })));
    }

    #[test]
    fn parallel_edges_use_shorter() {
        let g = RoutingGraph::from_parts(
            vec![GeoPoint::new(0.0, 0.0), GeoPoint::new(0.0, 0.001)],
            vec![
                Edge { a: 0, b: 1, feature_id: "long".into(), length: 150.0 },
                Edge { a: 1, b: 0, feature_id: "short".into(), length: 111.0 },
            ],
        )
        .unwrap();
        let p = shortest_path(&g, 0, 1).unwrap();
        assert_eq!(g.edges[p.edges[0]].feature_id, "short");
    }

    #[test]
    fn nearest_nodes() {
        let g = chain();
        assert_eq!(k_nearest_nodes(&g, g.nodes[1], 1), vec![1]);
        assert_eq!(k_nearest_nodes(&g, g.nodes[0], 4), vec![0, 1, 2]);
    }

    #[test]
    fn graph_from_features_merges_shared_vertices() {
        let a = GeoPoint::new(35.0, -85.3);
        let b = GeoPoint::new(35.001, -85.3);
        let c = GeoPoint::new(35.001, -85.299);
        let mk = |id: &str, pts: Vec<GeoPoint>| OsmFeature {
            feature_id: id.into(),
            polyline: pts,
            road_type: super::super::RoadType::Primary,
            oneway: false,
            tunnel: false,
        };
        let g = RoutingGraph::from_features(&[mk("x", vec![a, b]), mk("y", vec![b, c])]);
        assert_eq!(g.nodes.len(), 3);
        assert_eq!(g.edges.len(), 2);
        let mut out = Vec::new();
        g.write_edges(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("node_a,node_b,feature_id,length_m\n0,1,x,"));
    }
}
