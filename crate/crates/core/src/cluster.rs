//! HDBSCAN over latent points.
//!
//! Steps: core distances, a minimum spanning tree under mutual reachability,
//! the single-linkage hierarchy condensed with a minimum cluster size, and
//! excess-of-mass selection. Equal-weight edges are merged in one step, so
//! several components may join (or split, read top-down) at the same level.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("need more than {k} points for k = {k}, got {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("minimum cluster size must be at least 2, got {0}")]
    InvalidMinClusterSize(usize),
    #[error("points have inconsistent dimensions")]
    DimensionMismatch,
}

/// Cluster selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Excess of mass.
    #[default]
    Eom,
    /// Leaves of the condensed tree.
    Leaf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    /// Minimum cluster size `m`.
    pub min_cluster_size: usize,
    /// Neighbour count for core distances; defaults to `min_cluster_size`.
    pub min_samples: Option<usize>,
    pub selection: Selection,
}

impl ClusterParams {
    pub fn new(m: usize) -> Self {
        ClusterParams {
            min_cluster_size: m,
            min_samples: None,
            selection: Selection::Eom,
        }
    }
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams::new(5)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringResult {
    /// Cluster id per point, `None` for noise. Ids are consecutive from 0 and
    /// ordered by each cluster's smallest member index.
    pub labels: Vec<Option<usize>>,
    pub n_clusters: usize,
    pub core_distances: Vec<f64>,
    /// Membership strength in `[0, 1]`; 0 for noise.
    pub probabilities: Vec<f64>,
}

impl ClusteringResult {
    pub fn n_noise(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Member indices of each cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                out[*c].push(i);
            }
        }
        out
    }

    /// Writes `index,label,core_distance` rows; noise is labelled -1.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "index,label,core_distance")?;
        for (i, (l, c)) in self.labels.iter().zip(&self.core_distances).enumerate() {
            let label = l.map_or(-1, |v| v as i64);
            writeln!(w, "{i},{label},{c}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CondensedNode {
    pub lambda_birth: f64,
    /// Level at which the node splits or its last points fall out.
    pub lambda_death: f64,
    pub size: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    pub stability: f64,
}

/// Condensed cluster tree; node 0 is the root. Children always have larger
/// ids than their parent.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedTree {
    pub nodes: Vec<CondensedNode>,
    /// Deepest condensed node each point belonged to.
    pub point_node: Vec<usize>,
    /// Level at which each point left `point_node`.
    pub point_lambda: Vec<f64>,
    pub min_cluster_size: usize,
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Reciprocal of a merge weight; zero weights map to a large finite level so
/// stabilities stay comparable.
fn lambda_of(weight: f64) -> f64 {
    1.0 / weight.max(1e-300)
}

fn check_dims(points: &[Vec<f64>]) -> Result<(), ClusterError> {
    match points.first() {
        Some(p) if points.iter().any(|q| q.len() != p.len()) => Err(ClusterError::DimensionMismatch),
        _ => Ok(()),
    }
}

/// Distance from each point to its `k`-th nearest other point.
pub fn core_distances(points: &[Vec<f64>], k: usize) -> Result<Vec<f64>, ClusterError> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(ClusterError::TooFewPoints { k, n });
    }
    check_dims(points)?;
    let mut row = Vec::with_capacity(n - 1);
    Ok((0..n)
        .map(|i| {
            row.clear();
            row.extend((0..n).filter(|&j| j != i).map(|j| euclidean(&points[i], &points[j])));
            let (_, kth, _) = row.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect())
}

/// Minimum spanning tree under mutual reachability distance, by a dense Prim
/// scan starting from point 0. Ties go to the lowest index.
pub fn build_mr_mst(points: &[Vec<f64>], core: &[f64]) -> Vec<MstEdge> {
    let n = points.len();
    if n < 2 {
        return vec![];
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_w = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            let d = euclidean(&points[current], &points[j]).max(core[current]).max(core[j]);
            if d < best[j] {
                best[j] = d;
                from[j] = current;
            }
            if best[j] < next_w || next == usize::MAX {
                next_w = best[j];
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push(MstEdge {
            a: from[next].min(next),
            b: from[next].max(next),
            weight: next_w,
        });
        current = next;
    }
    edges
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller index as root for determinism
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Single-linkage dendrogram with k-ary merges. Ids `0..n` are points.
struct Dendrogram {
    children: Vec<Vec<usize>>,
    weight: Vec<f64>,
    size: Vec<usize>,
}

impl Dendrogram {
    fn build(mst: &[MstEdge], n: usize) -> Self {
        let mut d = Dendrogram {
            children: vec![Vec::new(); n],
            weight: vec![0.0; n],
            size: vec![1; n],
        };
        let mut sorted = mst.to_vec();
        sorted.sort_by(|x, y| x.weight.total_cmp(&y.weight).then((x.a, x.b).cmp(&(y.a, y.b))));
        let mut uf = UnionFind::new(n);
        // dendrogram node currently representing each union-find root
        let mut comp_node: Vec<usize> = (0..n).collect();
        let mut start = 0;
        while start < sorted.len() {
            let w = sorted[start].weight;
            let mut end = start;
            while end < sorted.len() && sorted[end].weight == w {
                end += 1;
            }
            let group = &sorted[start..end];
            let mut old: Vec<(usize, usize)> = Vec::new(); // (representative point, node)
            for e in group {
                for p in [e.a, e.b] {
                    let r = uf.find(p);
                    old.push((r, comp_node[r]));
                }
            }
            for e in group {
                uf.union(e.a, e.b);
            }
            old.sort_unstable();
            old.dedup();
            let mut merged: Vec<(usize, Vec<usize>)> = Vec::new();
            for (rep, node) in old {
                let root = uf.find(rep);
                match merged.iter_mut().find(|(r, _)| *r == root) {
                    Some((_, kids)) => kids.push(node),
                    None => merged.push((root, vec![node])),
                }
            }
            merged.sort_by_key(|(r, _)| *r);
            for (root, kids) in merged {
                let id = d.children.len();
                let size = kids.iter().map(|&k| d.size[k]).sum();
                d.children.push(kids);
                d.weight.push(w);
                d.size.push(size);
                comp_node[root] = id;
            }
            start = end;
        }
        d
    }

    fn root(&self) -> usize {
        self.children.len() - 1
    }

    fn leaves(&self, node: usize, n: usize, out: &mut Vec<usize>) {
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                stack.extend(&self.children[x]);
            }
        }
    }
}

/// Condenses the single-linkage hierarchy of `mst` with minimum cluster size `m`.
pub fn condense(mst: &[MstEdge], m: usize, n: usize) -> CondensedTree {
    let mut tree = CondensedTree {
        nodes: vec![CondensedNode {
            lambda_birth: 0.0,
            lambda_death: 0.0,
            size: n,
            parent: None,
            children: vec![],
            stability: 0.0,
        }],
        point_node: vec![0; n],
        point_lambda: vec![0.0; n],
        min_cluster_size: m,
    };
    if n < 2 || mst.len() + 1 != n {
        return tree;
    }
    let dendro = Dendrogram::build(mst, n);
    let mut stack = vec![(dendro.root(), 0usize)];
    let mut fallen = Vec::new();
    while let Some((node, cid)) = stack.pop() {
        let lambda = lambda_of(dendro.weight[node]);
        let kids = &dendro.children[node];
        let big: Vec<usize> = kids.iter().copied().filter(|&k| dendro.size[k] >= m).collect();
        let birth = tree.nodes[cid].lambda_birth;
        for &k in kids.iter().filter(|&&k| dendro.size[k] < m) {
            fallen.clear();
            dendro.leaves(k, n, &mut fallen);
            for &p in &fallen {
                tree.point_node[p] = cid;
                tree.point_lambda[p] = lambda;
            }
            tree.nodes[cid].stability += fallen.len() as f64 * (lambda - birth);
        }
        match big.len() {
            0 => tree.nodes[cid].lambda_death = lambda,
            1 => stack.push((big[0], cid)),
            _ => {
                tree.nodes[cid].lambda_death = lambda;
                for &k in &big {
                    let child = tree.nodes.len();
                    tree.nodes.push(CondensedNode {
                        lambda_birth: lambda,
                        lambda_death: lambda,
                        size: dendro.size[k],
                        parent: Some(cid),
                        children: vec![],
                        stability: 0.0,
                    });
                    tree.nodes[cid].children.push(child);
                    tree.nodes[cid].stability += dendro.size[k] as f64 * (lambda - birth);
                    stack.push((k, child));
                }
            }
        }
    }
    tree
}

/// Selects clusters from the condensed tree.
///
/// The root is only ever returned when it has no condensed children, in
/// which case it is one cluster if it holds at least `m` points.
pub fn extract(tree: &CondensedTree, selection: Selection) -> ClusteringResult {
    let n = tree.point_node.len();
    let k = tree.nodes.len();
    let mut selected = vec![false; k];
    if tree.nodes[0].children.is_empty() {
        selected[0] = n >= tree.min_cluster_size && n >= 2;
    } else {
        match selection {
            Selection::Leaf => {
                for (i, node) in tree.nodes.iter().enumerate().skip(1) {
                    selected[i] = node.children.is_empty();
                }
            }
            Selection::Eom => {
                let mut propagated = vec![0.0; k];
                // children have larger ids, so a reverse scan is bottom-up
                for i in (1..k).rev() {
                    let node = &tree.nodes[i];
                    let child_sum: f64 = node.children.iter().map(|&c| propagated[c]).sum();
                    if node.children.is_empty() || node.stability > child_sum {
                        selected[i] = true;
                        propagated[i] = node.stability;
                        let mut stack = node.children.clone();
                        while let Some(c) = stack.pop() {
                            selected[c] = false;
                            stack.extend(&tree.nodes[c].children);
                        }
                    } else {
                        propagated[i] = child_sum;
                    }
                }
            }
        }
    }

    // selected ancestor of each node
    let mut owner: Vec<Option<usize>> = vec![None; k];
    for i in 0..k {
        owner[i] = if selected[i] {
            Some(i)
        } else {
            tree.nodes[i].parent.and_then(|p| owner[p])
        };
    }
    let point_owner: Vec<Option<usize>> = tree.point_node.iter().map(|&c| owner[c]).collect();

    // compact ids by smallest member index
    let mut id_of = vec![None; k];
    let mut next = 0;
    for o in point_owner.iter().flatten() {
        if id_of[*o].is_none() {
            id_of[*o] = Some(next);
            next += 1;
        }
    }
    let mut max_lambda = vec![0.0f64; k];
    for (p, o) in point_owner.iter().enumerate() {
        if let Some(c) = o {
            max_lambda[*c] = max_lambda[*c].max(tree.point_lambda[p]);
        }
    }
    let probabilities = point_owner
        .iter()
        .enumerate()
        .map(|(p, o)| match o {
            Some(c) if max_lambda[*c] > 0.0 => (tree.point_lambda[p].min(max_lambda[*c]) / max_lambda[*c]).clamp(0.0, 1.0),
            Some(_) => 1.0,
            None => 0.0,
        })
        .collect();
    ClusteringResult {
        labels: point_owner.iter().map(|o| o.and_then(|c| id_of[c])).collect(),
        n_clusters: next,
        core_distances: vec![],
        probabilities,
    }
}

/// Full HDBSCAN. A single point is always noise.
pub fn hdbscan(points: &[Vec<f64>], params: &ClusterParams) -> Result<ClusteringResult, ClusterError> {
    let m = params.min_cluster_size;
    if m < 2 {
        return Err(ClusterError::InvalidMinClusterSize(m));
    }
    check_dims(points)?;
    let n = points.len();
    if n < 2 {
        return Ok(ClusteringResult {
            labels: vec![None; n],
            n_clusters: 0,
            core_distances: vec![0.0; n],
            probabilities: vec![0.0; n],
        });
    }
    let k = params.min_samples.unwrap_or(m).clamp(1, n - 1);
    let core = core_distances(points, k)?;
    let mst = build_mr_mst(points, &core);
    let tree = condense(&mst, m, n);
    let mut result = extract(&tree, params.selection);
    result.core_distances = core;
    Ok(result)
}
