//! Clustering and planning scores, and the end-to-end evaluation that turns a
//! latent mapping into one results row.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{euclidean, hdbscan, ClusterError, ClusterParams};
use crate::encoders::{EncoderError, Embedder};
use crate::lsr::{
    build_lsr, build_reference_graph, plan_latent, EncodedTuple, LsrError, NearestRule, ReferenceGraph, Roadmap,
};
use crate::synthgen::Dataset;
use crate::worlds::{is_legal_transition, WorldSpec, WorldState};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("label sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("silhouette needs at least two clusters")]
    OneCluster,
    #[error("holdout set is empty")]
    EmptyHoldout,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Lsr(#[from] LsrError),
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Homogeneity and completeness of `pred` against `truth`.
pub fn homogeneity_completeness<T: Ord, P: Ord>(truth: &[T], pred: &[P]) -> Result<(f64, f64), MetricsError> {
    if truth.len() != pred.len() {
        return Err(MetricsError::LengthMismatch(truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = truth.len() as f64;
    let mut joint: BTreeMap<(&T, &P), usize> = BTreeMap::new();
    let mut ct: BTreeMap<&T, usize> = BTreeMap::new();
    let mut cp: BTreeMap<&P, usize> = BTreeMap::new();
    for (t, p) in truth.iter().zip(pred) {
        *joint.entry((t, p)).or_default() += 1;
        *ct.entry(t).or_default() += 1;
        *cp.entry(p).or_default() += 1;
    }
    let h_t = entropy(ct.values().copied(), n);
    let h_p = entropy(cp.values().copied(), n);
    let h_joint = entropy(joint.values().copied(), n);
    // H(T|P) = H(T,P) - H(P)
    let h_t_given_p = (h_joint - h_p).max(0.0);
    let h_p_given_t = (h_joint - h_t).max(0.0);
    let h = if h_t == 0.0 { 1.0 } else { 1.0 - h_t_given_p / h_t };
    let c = if h_p == 0.0 { 1.0 } else { 1.0 - h_p_given_t / h_p };
    Ok((h.clamp(0.0, 1.0), c.clamp(0.0, 1.0)))
}

/// Mean silhouette coefficient; points in singleton clusters score 0.
pub fn mean_silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64, MetricsError> {
    if points.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(points.len(), labels.len()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(MetricsError::OneCluster);
    }
    let mut sums = vec![0.0; k];
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for (j, q) in points.iter().enumerate() {
            if i != j {
                sums[labels[j]] += euclidean(p, q);
            }
        }
        let own = labels[i];
        if sizes[own] <= 1 {
            continue;
        }
        let intra = sums[own] / (sizes[own] - 1) as f64;
        let closest = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = intra.max(closest);
        if denom > 0.0 {
            total += (closest - intra) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

/// Majority true state of each roadmap node; ties go to the smallest bitmask.
/// `truth` is indexed by reference-graph node.
pub fn node_true_states(rm: &Roadmap, truth: &[WorldState]) -> Vec<WorldState> {
    rm.nodes
        .iter()
        .map(|node| {
            let mut counts: BTreeMap<WorldState, usize> = BTreeMap::new();
            for &m in &node.members {
                *counts.entry(truth[m]).or_default() += 1;
            }
            // BTreeMap iterates ascending, so the first maximum wins ties
            let mut best = WorldState(0);
            let mut best_count = 0;
            for (s, c) in counts {
                if c > best_count {
                    best = s;
                    best_count = c;
                }
            }
            best
        })
        .collect()
}

/// Fraction of roadmap edges joining legally adjacent states; 1.0 with no edges.
pub fn edge_correctness(rm: &Roadmap, node_truth: &[WorldState], spec: &WorldSpec) -> f64 {
    if rm.edges.is_empty() {
        return 1.0;
    }
    let legal = rm
        .edges
        .iter()
        .filter(|e| is_legal_transition(spec, node_truth[e.a], node_truth[e.b]).unwrap_or(false))
        .count();
    legal as f64 / rm.edges.len() as f64
}

/// Checks one node path against the true start and goal states.
pub fn path_is_correct(
    path: &[usize],
    node_truth: &[WorldState],
    spec: &WorldSpec,
    start: WorldState,
    goal: WorldState,
) -> bool {
    let (Some(&first), Some(&last)) = (path.first(), path.last()) else {
        return false;
    };
    node_truth[first] == start
        && node_truth[last] == goal
        && path
            .windows(2)
            .all(|w| is_legal_transition(spec, node_truth[w[0]], node_truth[w[1]]).unwrap_or(false))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PathScores {
    pub pct_all: f64,
    pub pct_any: f64,
    /// Queries whose path enumeration hit the cap.
    pub truncated: usize,
    pub unreachable: usize,
}

/// Holdout observations with their true states.
fn holdout_observations(holdout: &Dataset) -> Vec<(&[f64], WorldState)> {
    holdout
        .tuples
        .iter()
        .zip(&holdout.sidecar)
        .filter(|(t, _)| !t.augmented)
        .flat_map(|(t, s)| [(t.o_i.as_slice(), s.state_i), (t.o_j.as_slice(), s.state_j)])
        .collect()
}

/// Plans between `trials` random start/goal pairs drawn from the holdout set.
/// `node_truth` gives each roadmap node's true state. Unreachable goals count
/// as failures.
#[allow(clippy::too_many_arguments)]
pub fn path_metrics<E: Embedder + ?Sized>(
    rm: &Roadmap,
    node_truth: &[WorldState],
    embedder: &E,
    holdout: &Dataset,
    spec: &WorldSpec,
    trials: usize,
    cap: usize,
    rule: NearestRule,
    rng: &mut ChaCha8Rng,
) -> Result<PathScores, MetricsError> {
    let obs = holdout_observations(holdout);
    if obs.is_empty() {
        return Err(MetricsError::EmptyHoldout);
    }
    if trials == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let mut all = 0usize;
    let mut any = 0usize;
    let mut scores = PathScores::default();
    for _ in 0..trials {
        // each trial owns a stream derived from the master seed
        let mut trial_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let (o_s, s_start) = obs[trial_rng.random_range(0..obs.len())];
        let (o_g, s_goal) = obs[trial_rng.random_range(0..obs.len())];
        let z_s = embedder.embed(o_s, s_start, &mut trial_rng)?;
        let z_g = embedder.embed(o_g, s_goal, &mut trial_rng)?;
        let res = plan_latent(rm, &z_s, &z_g, cap, rule)?;
        if res.truncated {
            scores.truncated += 1;
        }
        if res.unreachable {
            scores.unreachable += 1;
            continue;
        }
        let correct = res
            .paths
            .iter()
            .filter(|p| path_is_correct(p, node_truth, spec, s_start, s_goal))
            .count();
        if correct > 0 {
            any += 1;
        }
        if correct == res.paths.len() && correct > 0 {
            all += 1;
        }
    }
    scores.pct_all = 100.0 * all as f64 / trials as f64;
    scores.pct_any = 100.0 * any as f64 / trials as f64;
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub cluster: ClusterParams,
    pub trials: usize,
    /// Maximum number of shortest paths enumerated per query.
    pub cap: usize,
    pub nearest: NearestRule,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cluster: ClusterParams::default(),
            trials: 1000,
            cap: 100,
            nearest: NearestRule::Centroid,
        }
    }
}

/// One results row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub variant: String,
    pub world: String,
    pub seed: u64,
    pub n_nodes: usize,
    pub n_edges: usize,
    pub h_c: f64,
    pub c_c: f64,
    pub s_c: f64,
    pub c_e: f64,
    pub pct_all: f64,
    pub pct_any: f64,
    /// Fraction of encodings HDBSCAN labelled as noise.
    pub noise_fraction: f64,
    pub truncated: usize,
    pub unreachable: usize,
    /// `ok`, or the reason the row holds sentinel values.
    pub status: String,
}

impl EvalReport {
    /// Row of sentinel values for a job that could not be evaluated.
    pub fn failed(model: &str, variant: &str, world: &str, seed: u64, status: &str) -> Self {
        EvalReport {
            model: model.to_string(),
            variant: variant.to_string(),
            world: world.to_string(),
            seed,
            n_nodes: 0,
            n_edges: 0,
            h_c: f64::NAN,
            c_c: f64::NAN,
            s_c: f64::NAN,
            c_e: f64::NAN,
            pct_all: 0.0,
            pct_any: 0.0,
            noise_fraction: f64::NAN,
            truncated: 0,
            unreachable: 0,
            status: status.to_string(),
        }
    }

    /// Checks the declared ranges; undefined (NaN) scores are accepted.
    pub fn in_range(&self) -> bool {
        let unit = |v: f64| v.is_nan() || (0.0..=1.0).contains(&v);
        let pct = |v: f64| (0.0..=100.0).contains(&v);
        unit(self.h_c)
            && unit(self.c_c)
            && unit(self.c_e)
            && (self.s_c.is_nan() || (-1.0..=1.0).contains(&self.s_c))
            && pct(self.pct_all)
            && pct(self.pct_any)
            && self.pct_any >= self.pct_all
    }
}

/// Encodes every non-augmented tuple of `ds`. The embedder sees the true
/// state only through the sidecar; learned models ignore it.
pub fn encode_dataset<E: Embedder + ?Sized>(
    embedder: &E,
    ds: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EncodedTuple>, MetricsError> {
    ds.tuples
        .iter()
        .zip(&ds.sidecar)
        .filter(|(t, _)| !t.augmented)
        .map(|(t, side)| {
            Ok(EncodedTuple {
                z_i: embedder.embed(&t.o_i, side.state_i, rng)?,
                z_j: embedder.embed(&t.o_j, side.state_j, rng)?,
                s: t.s,
                augmented: false,
            })
        })
        .collect()
}

/// True state of each reference-graph node.
pub fn reference_truth(g: &ReferenceGraph, ds: &Dataset) -> Vec<WorldState> {
    let kept: Vec<usize> = (0..ds.len()).filter(|&t| !ds.tuples[t].augmented).collect();
    g.source
        .iter()
        .map(|&(t, is_j)| {
            let side = &ds.sidecar[kept[t]];
            if is_j {
                side.state_j
            } else {
                side.state_i
            }
        })
        .collect()
}

/// Everything produced while evaluating one latent mapping.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub graph: ReferenceGraph,
    pub labels: Option<crate::cluster::ClusteringResult>,
    pub roadmap: Option<Roadmap>,
    pub truth: Vec<WorldState>,
}

/// Encodes the training tuples, clusters them, builds the roadmap and scores
/// it, planning on the holdout set.
pub fn evaluate<E: Embedder + ?Sized>(
    embedder: &E,
    train_ds: &Dataset,
    holdout: &Dataset,
    cfg: &EvalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Evaluation, MetricsError> {
    let spec = train_ds.spec;
    let encoded = encode_dataset(embedder, train_ds, rng)?;
    if encoded.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let graph = build_reference_graph(&encoded);
    let truth = reference_truth(&graph, train_ds);
    let labels = hdbscan(&graph.points, &cfg.cluster)?;
    let mut report = EvalReport::failed("", "", spec.kind.name(), 0, "ok");
    report.noise_fraction = labels.n_noise() as f64 / graph.n_nodes() as f64;

    let clustered: Vec<usize> = (0..graph.n_nodes()).filter(|&i| labels.labels[i].is_some()).collect();
    if !clustered.is_empty() {
        let t: Vec<WorldState> = clustered.iter().map(|&i| truth[i]).collect();
        let p: Vec<usize> = clustered.iter().map(|&i| labels.labels[i].unwrap_or(0)).collect();
        let (h, c) = homogeneity_completeness(&t, &p)?;
        report.h_c = h;
        report.c_c = c;
        let pts: Vec<Vec<f64>> = clustered.iter().map(|&i| graph.points[i].clone()).collect();
        report.s_c = match mean_silhouette(&pts, &p) {
            Ok(s) => s,
            Err(MetricsError::OneCluster) => f64::NAN,
            Err(e) => return Err(e),
        };
    }

    let roadmap = match build_lsr(&graph, &labels) {
        Ok(rm) => rm,
        Err(LsrError::NoClusters) => {
            report.status = "no-clusters".into();
            return Ok(Evaluation {
                report,
                graph,
                labels: Some(labels),
                roadmap: None,
                truth,
            });
        }
        Err(e) => return Err(e.into()),
    };
    let node_truth = node_true_states(&roadmap, &truth);
    report.n_nodes = roadmap.n_nodes();
    report.n_edges = roadmap.n_edges();
    report.c_e = edge_correctness(&roadmap, &node_truth, &spec);
    let scores = path_metrics(
        &roadmap,
        &node_truth,
        embedder,
        holdout,
        &spec,
        cfg.trials,
        cfg.cap,
        cfg.nearest,
        rng,
    )?;
    report.pct_all = scores.pct_all;
    report.pct_any = scores.pct_any;
    report.truncated = scores.truncated;
    report.unreachable = scores.unreachable;
    Ok(Evaluation {
        report,
        graph,
        labels: Some(labels),
        roadmap: Some(roadmap),
        truth,
    })
}
