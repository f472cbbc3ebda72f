//! Latent space roadmap: a graph over clusters of encodings whose edges are
//! backed by observed action pairs, plus shortest-path planning on it.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{euclidean, ClusteringResult};
use crate::encoders::{encode, EncoderError, EncoderModel};

#[derive(Debug, Error)]
pub enum LsrError {
    #[error("clustering produced no clusters")]
    NoClusters,
    #[error("roadmap has no nodes")]
    EmptyRoadmap,
    #[error("node {0} does not exist")]
    UnknownNode(usize),
    #[error("labels cover {labels} points but the graph has {nodes}")]
    LabelCount { labels: usize, nodes: usize },
    #[error("malformed roadmap file: {0}")]
    Parse(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One encoded training tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTuple {
    pub z_i: Vec<f64>,
    pub z_j: Vec<f64>,
    pub s: u8,
    pub augmented: bool,
}

/// Encodings as nodes and action pairs as edges.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceGraph {
    pub points: Vec<Vec<f64>>,
    /// `(tuple index, is_j)` of each node.
    pub source: Vec<(usize, bool)>,
    pub edges: Vec<(usize, usize)>,
}

impl ReferenceGraph {
    pub fn n_nodes(&self) -> usize {
        self.points.len()
    }
}

/// Augmented tuples are skipped entirely: they add neither nodes nor edges.
/// Every other tuple adds two nodes; action pairs also add an edge.
pub fn build_reference_graph(encoded: &[EncodedTuple]) -> ReferenceGraph {
    let mut g = ReferenceGraph {
        points: Vec::new(),
        source: Vec::new(),
        edges: Vec::new(),
    };
    for (t, e) in encoded.iter().enumerate().filter(|(_, e)| !e.augmented) {
        let a = g.points.len();
        g.points.push(e.z_i.clone());
        g.points.push(e.z_j.clone());
        g.source.push((t, false));
        g.source.push((t, true));
        if e.s == 0 {
            g.edges.push((a, a + 1));
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoadmapNode {
    pub id: usize,
    pub centroid: Vec<f64>,
    /// Reference-graph node indices.
    pub members: Vec<usize>,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoadmapEdge {
    pub a: usize,
    pub b: usize,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Roadmap {
    pub nodes: Vec<RoadmapNode>,
    /// Undirected, `a < b`, sorted.
    pub edges: Vec<RoadmapEdge>,
    /// Sorted neighbour lists.
    pub adjacency: Vec<Vec<usize>>,
    /// Member encodings per node, used by the closest-member rule.
    pub member_points: Vec<Vec<Vec<f64>>>,
}

impl Roadmap {
    /// Builds a roadmap from explicit nodes and edges.
    pub fn from_parts(nodes: Vec<RoadmapNode>, mut edges: Vec<RoadmapEdge>) -> Result<Self, LsrError> {
        let n = nodes.len();
        let mut adjacency = vec![Vec::new(); n];
        for e in &mut edges {
            if e.a >= n {
                return Err(LsrError::UnknownNode(e.a));
            }
            if e.b >= n {
                return Err(LsrError::UnknownNode(e.b));
            }
            if e.a > e.b {
                std::mem::swap(&mut e.a, &mut e.b);
            }
        }
        edges.sort_by_key(|e| (e.a, e.b));
        for e in &edges {
            adjacency[e.a].push(e.b);
            adjacency[e.b].push(e.a);
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        Ok(Roadmap {
            nodes,
            edges,
            adjacency,
            member_points: vec![],
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Writes `id,size,c0,c1,...` node rows.
    pub fn write_nodes_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let z = self.nodes.first().map_or(0, |n| n.centroid.len());
        let header: Vec<String> = (0..z).map(|k| format!("c{k}")).collect();
        writeln!(w, "id,size{}", header.iter().map(|h| format!(",{h}")).collect::<String>())?;
        for n in &self.nodes {
            write!(w, "{},{}", n.id, n.size)?;
            for c in &n.centroid {
                write!(w, ",{c}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Writes `a,b,support` edge rows.
    pub fn write_edges_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "a,b,support")?;
        for e in &self.edges {
            writeln!(w, "{},{},{}", e.a, e.b, e.support)?;
        }
        Ok(())
    }

    /// Reads the two CSV files written by [`Roadmap::write_nodes_csv`] and
    /// [`Roadmap::write_edges_csv`]. Member lists are not stored, so they
    /// come back empty.
    pub fn read_csv<R1: BufRead, R2: BufRead>(nodes: R1, edges: R2) -> Result<Self, LsrError> {
        let parse_err = |m: String| LsrError::Parse(m);
        let mut out_nodes = Vec::new();
        for (i, line) in nodes.lines().enumerate().skip(1) {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 2 {
                return Err(parse_err(format!("node line {}", i + 1)));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| parse_err(format!("line {}: {e}", i + 1)));
            let int = |s: &str| s.trim().parse::<usize>().map_err(|e| parse_err(format!("line {}: {e}", i + 1)));
            let id = int(fields[0])?;
            if id != out_nodes.len() {
                return Err(parse_err(format!("node ids must be consecutive, got {id}")));
            }
            out_nodes.push(RoadmapNode {
                id,
                size: int(fields[1])?,
                centroid: fields[2..].iter().map(|s| num(s)).collect::<Result<_, _>>()?,
                members: vec![],
            });
        }
        let mut out_edges = Vec::new();
        for (i, line) in edges.lines().enumerate().skip(1) {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<usize> = line
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| parse_err(format!("edge line {}: {e}", i + 1)))?;
            if f.len() != 3 {
                return Err(parse_err(format!("edge line {}", i + 1)));
            }
            out_edges.push(RoadmapEdge {
                a: f[0],
                b: f[1],
                support: f[2],
            });
        }
        Roadmap::from_parts(out_nodes, out_edges)
    }
}

/// Clusters become nodes; a reference edge whose endpoints lie in two
/// different clusters backs a roadmap edge. Edges touching noise are dropped.
pub fn build_lsr(g: &ReferenceGraph, labels: &ClusteringResult) -> Result<Roadmap, LsrError> {
    if labels.labels.len() != g.n_nodes() {
        return Err(LsrError::LabelCount {
            labels: labels.labels.len(),
            nodes: g.n_nodes(),
        });
    }
    if labels.n_clusters == 0 {
        return Err(LsrError::NoClusters);
    }
    let members = labels.members();
    let nodes: Vec<RoadmapNode> = members
        .iter()
        .enumerate()
        .map(|(id, m)| {
            let dim = g.points[m[0]].len();
            let mut c = vec![0.0; dim];
            for &p in m {
                for (ck, v) in c.iter_mut().zip(&g.points[p]) {
                    *ck += v;
                }
            }
            for ck in &mut c {
                *ck /= m.len() as f64;
            }
            RoadmapNode {
                id,
                centroid: c,
                members: m.clone(),
                size: m.len(),
            }
        })
        .collect();
    let mut support: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for &(p, q) in &g.edges {
        if let (Some(a), Some(b)) = (labels.labels[p], labels.labels[q]) {
            if a != b {
                *support.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
    }
    let edges = support
        .into_iter()
        .map(|((a, b), support)| RoadmapEdge { a, b, support })
        .collect();
    let mut rm = Roadmap::from_parts(nodes, edges)?;
    rm.member_points = members
        .iter()
        .map(|m| m.iter().map(|&p| g.points[p].clone()).collect())
        .collect();
    Ok(rm)
}

/// How a latent point is matched to a roadmap node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NearestRule {
    /// Closest cluster centroid.
    #[default]
    Centroid,
    /// Cluster of the closest member encoding.
    Member,
}

/// Node whose centroid is closest to `z`; ties go to the lowest id.
pub fn nearest_node(rm: &Roadmap, z: &[f64]) -> Result<usize, LsrError> {
    nearest_by(rm, z, NearestRule::Centroid)
}

pub fn nearest_by(rm: &Roadmap, z: &[f64], rule: NearestRule) -> Result<usize, LsrError> {
    if rm.nodes.is_empty() {
        return Err(LsrError::EmptyRoadmap);
    }
    let dist = |id: usize| -> f64 {
        match rule {
            NearestRule::Centroid => euclidean(&rm.nodes[id].centroid, z),
            NearestRule::Member => rm
                .member_points
                .get(id)
                .into_iter()
                .flatten()
                .map(|p| euclidean(p, z))
                .fold(f64::INFINITY, f64::min),
        }
    };
    let mut best = 0;
    let mut best_d = dist(0);
    for id in 1..rm.nodes.len() {
        let d = dist(id);
        if d < best_d {
            best = id;
            best_d = d;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanResult {
    pub start_node: usize,
    pub goal_node: usize,
    /// All shortest node paths (up to the cap), in lexicographic order.
    pub paths: Vec<Vec<usize>>,
    /// More shortest paths exist than were returned.
    pub truncated: bool,
    /// Goal not reachable from start; `paths` is empty.
    pub unreachable: bool,
}

/// All shortest paths from `a` to `b`, at most `cap` of them.
pub fn shortest_paths(rm: &Roadmap, a: usize, b: usize, cap: usize) -> Result<PlanResult, LsrError> {
    let n = rm.n_nodes();
    for x in [a, b] {
        if x >= n {
            return Err(LsrError::UnknownNode(x));
        }
    }
    let mut result = PlanResult {
        start_node: a,
        goal_node: b,
        paths: vec![],
        truncated: false,
        unreachable: false,
    };
    let mut dist = vec![usize::MAX; n];
    let mut count = vec![0u128; n];
    dist[a] = 0;
    count[a] = 1;
    let mut queue = VecDeque::from([a]);
    while let Some(u) = queue.pop_front() {
        if u == b {
            break;
        }
        for &v in &rm.adjacency[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
            if dist[v] == dist[u] + 1 {
                count[v] = count[v].saturating_add(count[u]);
            }
        }
    }
    if dist[b] == usize::MAX {
        result.unreachable = true;
        return Ok(result);
    }
    result.truncated = count[b] > cap as u128;
    if cap == 0 {
        return Ok(result);
    }
    // walk the shortest-path DAG backwards from the goal
    let mut stack: Vec<(usize, Vec<usize>)> = vec![(b, vec![b])];
    let mut found = Vec::new();
    while let Some((u, rev)) = stack.pop() {
        if u == a {
            found.push(rev.iter().rev().copied().collect::<Vec<_>>());
            if found.len() >= cap {
                break;
            }
            continue;
        }
        for &v in rm.adjacency[u].iter().rev() {
            if dist[v] != usize::MAX && dist[v] + 1 == dist[u] {
                let mut next = rev.clone();
                next.push(v);
                stack.push((v, next));
            }
        }
    }
    found.sort();
    result.paths = found;
    Ok(result)
}

/// Encodes start and goal, snaps both to roadmap nodes and plans between them.
pub fn plan(
    rm: &Roadmap,
    model: &EncoderModel,
    o_start: &[f64],
    o_goal: &[f64],
    cap: usize,
) -> Result<PlanResult, LsrError> {
    plan_latent(rm, &encode(model, o_start)?, &encode(model, o_goal)?, cap, NearestRule::Centroid)
}

/// Planning between latent points that are already encoded.
pub fn plan_latent(
    rm: &Roadmap,
    z_start: &[f64],
    z_goal: &[f64],
    cap: usize,
    rule: NearestRule,
) -> Result<PlanResult, LsrError> {
    let a = nearest_by(rm, z_start, rule)?;
    let b = nearest_by(rm, z_goal, rule)?;
    shortest_paths(rm, a, b, cap)
}
