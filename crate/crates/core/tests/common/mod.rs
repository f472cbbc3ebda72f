//! Independent reference implementations used as test oracles.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::{BTreeMap, VecDeque};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mutual reachability matrix with core distance = `k`-th nearest other point.
pub fn mutual_reachability(points: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let n = points.len();
    let d: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dist(&points[i], &points[j])).collect()).collect();
    let core: Vec<f64> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d[i][j]).collect();
            row.sort_by(f64::total_cmp);
            row[k - 1]
        })
        .collect();
    (0..n)
        .map(|i| (0..n).map(|j| d[i][j].max(core[i]).max(core[j])).collect())
        .collect()
}

/// Components of `set` using only edges strictly lighter than `w`.
fn components(set: &[usize], mr: &[Vec<f64>], w: f64) -> Vec<Vec<usize>> {
    let mut seen = vec![false; set.len()];
    let mut out = Vec::new();
    for s in 0..set.len() {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![set[s]];
        let mut q = VecDeque::from([s]);
        while let Some(a) = q.pop_front() {
            for b in 0..set.len() {
                if !seen[b] && mr[set[a]][set[b]] < w {
                    seen[b] = true;
                    comp.push(set[b]);
                    q.push_back(b);
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Smallest threshold at which `set` is connected (edges `<=` threshold).
fn connect_level(set: &[usize], mr: &[Vec<f64>]) -> f64 {
    let mut ws: Vec<f64> = Vec::new();
    for (x, &a) in set.iter().enumerate() {
        for &b in &set[x + 1..] {
            ws.push(mr[a][b]);
        }
    }
    ws.sort_by(f64::total_cmp);
    ws.dedup();
    // connected with edges <= w  <=>  one component under edges < next(w)
    let connected = |i: usize| {
        let bound = if i + 1 < ws.len() { ws[i + 1] } else { f64::INFINITY };
        components(set, mr, bound).len() == 1
    };
    let (mut lo, mut hi) = (0, ws.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if connected(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    ws[lo]
}

struct Cluster {
    birth: f64,
    stability: f64,
    parent: Option<usize>,
    children: Vec<usize>,
}

/// HDBSCAN straight from the threshold-graph definition: walk the
/// connectivity levels of each cluster from the top, shedding components
/// smaller than `m`, and select clusters by excess of mass. Labels are
/// canonicalised by first occurrence.
pub fn brute_hdbscan(points: &[Vec<f64>], m: usize, k: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let mr = mutual_reachability(points, k);
    let lambda = |w: f64| 1.0 / w.max(1e-300);
    let mut clusters = vec![Cluster {
        birth: 0.0,
        stability: 0.0,
        parent: None,
        children: vec![],
    }];
    let mut home = vec![0usize; n];
    let mut work = vec![((0..n).collect::<Vec<_>>(), 0usize)];
    while let Some((mut set, cid)) = work.pop() {
        loop {
            let w = connect_level(&set, &mr);
            let l = lambda(w);
            let birth = clusters[cid].birth;
            let comps = components(&set, &mr, w);
            let (big, small): (Vec<_>, Vec<_>) = comps.into_iter().partition(|c| c.len() >= m);
            for c in &small {
                for &p in c {
                    home[p] = cid;
                }
                clusters[cid].stability += c.len() as f64 * (l - birth);
            }
            match big.len() {
                0 => break,
                1 => set = big.into_iter().next().unwrap(),
                _ => {
                    for c in big {
                        clusters[cid].stability += c.len() as f64 * (l - birth);
                        let id = clusters.len();
                        clusters.push(Cluster {
                            birth: l,
                            stability: 0.0,
                            parent: Some(cid),
                            children: vec![],
                        });
                        clusters[cid].children.push(id);
                        work.push((c, id));
                    }
                    break;
                }
            }
        }
    }

    fn eom(c: usize, cl: &[Cluster], out: &mut Vec<usize>) -> f64 {
        if cl[c].children.is_empty() {
            out.push(c);
            return cl[c].stability;
        }
        let mut below = Vec::new();
        let sum: f64 = cl[c].children.iter().map(|&ch| eom(ch, cl, &mut below)).sum();
        if cl[c].stability > sum {
            out.push(c);
            cl[c].stability
        } else {
            out.extend(below);
            sum
        }
    }
    let mut selected = Vec::new();
    if clusters[0].children.is_empty() {
        if n >= m {
            selected.push(0);
        }
    } else {
        for &ch in &clusters[0].children {
            eom(ch, &clusters, &mut selected);
        }
    }
    let owner = |mut c: usize| -> Option<usize> {
        loop {
            if selected.contains(&c) {
                return Some(c);
            }
            c = clusters[c].parent?;
        }
    };
    canonical(&home.iter().map(|&c| owner(c)).collect::<Vec<_>>())
}

/// Relabels by order of first occurrence so partitions compare directly.
pub fn canonical(labels: &[Option<usize>]) -> Vec<Option<usize>> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            l.map(|c| {
                let next = map.len();
                *map.entry(c).or_insert(next)
            })
        })
        .collect()
}

/// Total weight of a minimum spanning tree of the complete graph `w` (Kruskal).
pub fn kruskal_weight(w: &[Vec<f64>]) -> f64 {
    let n = w.len();
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            edges.push((w[a][b], a, b));
        }
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut x = x;
        while p[x] != r {
            let nx = p[x];
            p[x] = r;
            x = nx;
        }
        r
    }
    let mut total = 0.0;
    for (wt, a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            total += wt;
        }
    }
    total
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Number of shortest `a -> b` paths by exhaustive depth-first search over
/// simple paths.
pub fn dfs_shortest_path_count(adj: &[Vec<usize>], a: usize, b: usize) -> (Option<usize>, u64) {
    let mut best: Option<usize> = None;
    let mut count = 0u64;
    let mut on_path = vec![false; adj.len()];
    fn go(
        adj: &[Vec<usize>],
        v: usize,
        b: usize,
        len: usize,
        on_path: &mut [bool],
        best: &mut Option<usize>,
        count: &mut u64,
    ) {
        if best.is_some_and(|bl| len > bl) {
            return;
        }
        if v == b {
            match *best {
                Some(bl) if bl == len => *count += 1,
                _ => {
                    *best = Some(len);
                    *count = 1;
                }
            }
            return;
        }
        on_path[v] = true;
        for &w in &adj[v] {
            if !on_path[w] {
                go(adj, w, b, len + 1, on_path, best, count);
            }
        }
        on_path[v] = false;
    }
    go(adj, a, b, 0, &mut on_path, &mut best, &mut count);
    (best, count)
}
