//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout. The
//! process fails if any criterion fails, except for checks listed in
//! `KNOWN_DEVIATIONS`, which are still executed and reported.

mod common;

use std::time::{Duration, Instant};

use latent_roadmap::cli::{run_experiment, write_results_csv, ExperimentConfig};
use latent_roadmap::cluster::{hdbscan, ClusterParams};
use latent_roadmap::encoders::{
    composite_loss, loss_kl, loss_kl_grad, loss_ntxent, loss_pc, loss_pc_grad, loss_recon, loss_recon_grad,
    EncoderModel, Hyper, LossWeights, ModelKind, NoisyOracle, OracleEncoder, PcDistance,
};
use latent_roadmap::lsr::{shortest_paths, Roadmap, RoadmapEdge, RoadmapNode};
use latent_roadmap::metrics::{evaluate, homogeneity_completeness, mean_silhouette, EvalConfig, EvalReport};
use latent_roadmap::nn::{grad_check, Activation, Mlp};
use latent_roadmap::synthgen::{
    generate_dataset, render, sample_factors, split_holdout, DataTuple, RenderConfig, RenderParams,
};
use latent_roadmap::worlds::{enumerate_states, legal_transitions, WorldKind, WorldSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Checks that are expected to fail. The silhouette reference value is the
/// score of the two outer points only; the mean over all four points of
/// {0, 0.1} vs {10, 10.1} is 0.98999975, 5e-5 away.
const KNOWN_DEVIATIONS: &[&str] = &["5/silhouette"];

type Runner = fn() -> Vec<Check>;

struct Check {
    name: &'static str,
    ok: bool,
    detail: String,
}

fn check(name: &'static str, ok: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        ok,
        detail: detail.into(),
    }
}

fn within(name: &'static str, elapsed: Duration, limit_s: f64) -> Check {
    check(
        name,
        elapsed.as_secs_f64() < limit_s,
        format!("{:.2}s (limit {limit_s}s)", elapsed.as_secs_f64()),
    )
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn row<'a>(rows: &'a [EvalReport], model: ModelKind, variant: &str) -> &'a EvalReport {
    rows.iter()
        .find(|r| r.model == model.label() && r.variant == variant)
        .unwrap_or_else(|| panic!("no row for {model} {variant}"))
}

fn fmt_row(r: &EvalReport) -> String {
    format!(
        "{} {}: |V|={} h_c={:.3} c_c={:.3} c_e={:.3} all={:.1} any={:.1}",
        r.model, r.variant, r.n_nodes, r.h_c, r.c_c, r.c_e, r.pct_all, r.pct_any
    )
}

fn crit1() -> Vec<Check> {
    let t = Instant::now();
    let mut out = Vec::new();
    for (kind, v, e) in [
        (WorldKind::BoxManipulation, 126, 420),
        (WorldKind::ShelfArrangement, 70, 320),
        (WorldKind::BoxStacking, 12, 24),
    ] {
        let spec = WorldSpec::new(kind);
        let (nv, ne) = (enumerate_states(&spec).len(), legal_transitions(&spec).len());
        out.push(check(
            "counts",
            nv == v && ne == e,
            format!("{kind}: {nv}/{ne} (expected {v}/{e})"),
        ));
    }
    out.push(within("runtime", t.elapsed(), 1.0));
    out
}

fn crit2() -> Vec<Check> {
    let t = Instant::now();
    let spec = WorldSpec::new(WorldKind::BoxStacking);
    let params = RenderParams::new(&spec, RenderConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ds = generate_dataset(&spec, &params, 2500, 0.5, &mut rng).unwrap();
    let (train, holdout) = split_holdout(&ds, 0.1, &mut rng).unwrap();
    let oracle = NoisyOracle {
        oracle: OracleEncoder::new(&spec, 12),
        noise_scale: 0.01,
    };
    let cfg = EvalConfig {
        cluster: ClusterParams::new(5),
        ..EvalConfig::default()
    };
    let r = evaluate(&oracle, &train, &holdout, &cfg, &mut rng).unwrap().report;
    vec![
        check(
            "oracle",
            r.n_nodes == 12
                && r.h_c == 1.0
                && r.c_c == 1.0
                && r.c_e == 1.0
                && r.pct_all == 100.0
                && r.pct_any == 100.0,
            fmt_row(&r),
        ),
        within("runtime", t.elapsed(), 30.0),
    ]
}

/// Minimum distance of any non-smooth quantity from its kink for the
/// composite-loss check points: with a finite-difference step of 1e-4 no
/// probe can cross a kink.
const KINK_MARGIN: f64 = 1e-2;

/// Smallest distance of a ReLU pre-activation, an L1 coordinate difference
/// or an active-side hinge from its kink, over the whole batch.
fn kink_distance(model: &EncoderModel, tuples: &[DataTuple], eps: &[Vec<f64>], w: &LossWeights) -> f64 {
    fn relu_margin(net: &Mlp, x: &[f64]) -> (f64, Vec<f64>) {
        let (out, tape) = net.forward(x).unwrap();
        let m = tape
            .pre_activations()
            .iter()
            .zip(net.activations())
            .filter(|(_, a)| **a == Activation::Relu)
            .flat_map(|(z, _)| z.iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min);
        (m, out)
    }
    let pc_margin = |zi: &[f64], zj: &[f64], s: u8| {
        let mut m = zi.iter().zip(zj).map(|(a, b)| (a - b).abs()).fold(f64::INFINITY, f64::min);
        if s == 0 {
            m = m.min((w.d_m - w.distance.eval(zi, zj)).abs());
        }
        m
    };
    let mut margin = f64::INFINITY;
    for (t, tuple) in tuples.iter().enumerate() {
        let mut codes = Vec::new();
        for (k, o) in [&tuple.o_i, &tuple.o_j].into_iter().enumerate() {
            match model {
                EncoderModel::Ae(ae) | EncoderModel::BetaVae(ae) | EncoderModel::PcAe(ae) | EncoderModel::PcVae(ae) => {
                    let (m, h) = relu_margin(&ae.enc, o);
                    margin = margin.min(m);
                    let z = ae.dec.input_dim();
                    let sample: Vec<f64> = if model.kind().is_variational() {
                        (0..z).map(|c| h[c] + (0.5 * h[z + c]).exp() * eps[2 * t + k][c]).collect()
                    } else {
                        h.clone()
                    };
                    margin = margin.min(relu_margin(&ae.dec, &sample).0);
                    codes.push(h[..z].to_vec());
                }
                EncoderModel::PcSiamese(net) | EncoderModel::CeSiamese(net) => {
                    let (m, z) = relu_margin(net, o);
                    margin = margin.min(m);
                    codes.push(z);
                }
                _ => unreachable!("not a trainable model"),
            }
        }
        if matches!(model.kind(), ModelKind::PcAe | ModelKind::PcVae | ModelKind::PcSiamese) {
            margin = margin.min(pc_margin(&codes[0], &codes[1], tuple.s));
        }
    }
    margin
}

fn crit3() -> Vec<Check> {
    const POINTS: usize = 20;
    const TOL: f64 = 1e-5;
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut out = Vec::new();
    let mut report = |name: &'static str, errs: Vec<f64>| {
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        out.push(check(name, errs.len() == POINTS && worst < TOL, format!("max rel err {worst:.2e}")));
    };

    let errs = (0..POINTS)
        .map(|_| {
            let o = normal_vec(&mut rng, 9);
            let rec = normal_vec(&mut rng, 9);
            grad_check(&rec, 1e-5, |p| (loss_recon(&o, p), loss_recon_grad(&o, p)))
        })
        .collect();
    report("recon", errs);

    let errs = (0..POINTS)
        .map(|_| {
            let p = normal_vec(&mut rng, 10);
            grad_check(&p, 1e-5, |p| {
                let (mu, lv) = p.split_at(5);
                let (gm, gl) = loss_kl_grad(mu, lv);
                (loss_kl(mu, lv), [gm, gl].concat())
            })
        })
        .collect();
    report("kl", errs);

    for (name, s, distance) in [
        ("pc s=1 L1^2", 1u8, PcDistance::SquaredL1),
        ("pc s=0 L1^2", 0, PcDistance::SquaredL1),
        ("pc s=1 L2^2", 1, PcDistance::SquaredL2),
        ("pc s=0 L2^2", 0, PcDistance::SquaredL2),
    ] {
        let errs = (0..POINTS)
            .map(|_| {
                let p = normal_vec(&mut rng, 8);
                // margin above the current distance keeps the hinge active
                let d_m = 1.5 * distance.eval(&p[..4], &p[4..]);
                grad_check(&p, 1e-5, |p| {
                    let (zi, zj) = p.split_at(4);
                    let (l, g) = loss_pc_grad(zi, zj, s, d_m, distance);
                    assert_eq!(l, loss_pc(zi, zj, s, d_m, distance));
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    (l, [g, neg].concat())
                })
            })
            .collect();
        report(name, errs);
    }

    let pairing = [1, 0, 3, 2, 5, 4];
    let errs = (0..POINTS)
        .map(|_| {
            let p = normal_vec(&mut rng, 6 * 4);
            grad_check(&p, 1e-6, |p| {
                let batch: Vec<Vec<f64>> = p.chunks(4).map(|c| c.to_vec()).collect();
                let (l, g) = loss_ntxent(&batch, &pairing, 0.5).unwrap();
                (l, g.concat())
            })
        })
        .collect();
    report("nt-xent", errs);

    // composites on small networks with random tuples of both kinds
    let hyper = Hyper {
        z_dim: 3,
        hidden: vec![6, 5],
        d_m_siamese: 2.0,
        ..Hyper::default()
    };
    for kind in [
        ModelKind::Ae,
        ModelKind::BetaVae,
        ModelKind::PcAe,
        ModelKind::PcVae,
        ModelKind::PcSiamese,
        ModelKind::CeSiamese,
    ] {
        let errs = (0..POINTS)
            .map(|_| {
                let w = hyper.weights_at(kind, 5, 10, 2.0);
                // random points in parameter space, kept only if they sit
                // clearly inside a differentiable region
                let (mut model, tuples, eps) = loop {
                    let mut model = EncoderModel::init(kind, 8, &hyper, &mut rng).unwrap();
                    let n = model.flat_params().len();
                    let p: Vec<f64> = normal_vec(&mut rng, n).iter().map(|v| 0.2 * v).collect();
                    model.set_flat_params(&p).unwrap();
                    let tuples: Vec<DataTuple> = (0..4)
                        .map(|i| DataTuple {
                            o_i: normal_vec(&mut rng, 8),
                            o_j: normal_vec(&mut rng, 8),
                            s: (i % 2) as u8,
                            augmented: false,
                        })
                        .collect();
                    let eps: Vec<Vec<f64>> = (0..8).map(|_| normal_vec(&mut rng, 3)).collect();
                    if kink_distance(&model, &tuples, &eps, &w) > KINK_MARGIN {
                        break (model, tuples, eps);
                    }
                };
                let batch: Vec<&DataTuple> = tuples.iter().collect();
                let flat = model.flat_params();
                grad_check(&flat, 1e-4, |p| {
                    model.set_flat_params(p).unwrap();
                    let lg = composite_loss(&batch, &model, &w, &eps).unwrap();
                    (lg.loss, lg.grads.concat())
                })
            })
            .collect();
        report(kind.name(), errs);
    }
    out.push(within("runtime", t.elapsed(), 30.0));
    out
}

fn crit4() -> Vec<Check> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut out = Vec::new();
    for inst in 0..10 {
        let blobs = 2 + inst % 3;
        let centers: Vec<Vec<f64>> = (0..blobs).map(|_| (0..2).map(|_| rng.random_range(-6.0..6.0)).collect()).collect();
        let points: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let c = &centers[i % blobs];
                let spread = if i % 7 == 0 { 4.0 } else { 1.0 };
                c.iter().map(|x| x + spread * rng.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect();
        let m = 3 + inst % 4;
        let got = hdbscan(&points, &ClusterParams::new(m)).unwrap();
        let want = common::brute_hdbscan(&points, m, m);
        let got = common::canonical(&got.labels);
        let clusters = want.iter().flatten().max().map_or(0, |c| c + 1);
        out.push(check(
            "partition",
            got == want,
            format!("instance {inst}: m={m}, {clusters} clusters"),
        ));
    }
    out.push(within("runtime", t.elapsed(), 10.0));
    out
}

fn crit5() -> Vec<Check> {
    let (h1, c1) = homogeneity_completeness(&[0, 0, 0, 0], &[0, 1, 2, 3]).unwrap();
    let (h2, c2) = homogeneity_completeness(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap();
    let pts = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
    let s = mean_silhouette(&pts, &[0, 0, 1, 1]).unwrap();
    let node = |id| RoadmapNode {
        id,
        centroid: vec![id as f64],
        members: vec![id],
        size: 1,
    };
    let edge = |a, b| RoadmapEdge { a, b, support: 1 };
    let cycle = Roadmap::from_parts(
        (0..4).map(node).collect(),
        vec![edge(0, 1), edge(1, 2), edge(2, 3), edge(0, 3)],
    )
    .unwrap();
    let paths = shortest_paths(&cycle, 0, 2, 100).unwrap().paths;
    vec![
        check("h=1,c=0", h1 == 1.0 && c1 == 0.0, format!("h={h1} c={c1}")),
        check("h=0,c=1", h2 == 0.0 && c2 == 1.0, format!("h={h2} c={c2}")),
        check("silhouette", (s - 0.99005).abs() < 1e-6, format!("s={s:.8} vs 0.99005")),
        check("4-cycle paths", paths.len() == 2, format!("{} paths", paths.len())),
    ]
}

fn q1_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(WorldKind::BoxStacking, 6);
    cfg.models = vec![
        ModelKind::Raw,
        ModelKind::Pca,
        ModelKind::Ae,
        ModelKind::PcSiamese,
        ModelKind::CeSiamese,
    ];
    cfg.render.viewpoints = 2;
    cfg.hyper.d_m_siamese = 4.0;
    cfg
}

fn crit6() -> Vec<Check> {
    let t = Instant::now();
    let rows = run_experiment(&q1_config()).unwrap();
    let mut out = Vec::new();
    for kind in [ModelKind::CeSiamese, ModelKind::PcSiamese] {
        let r = row(&rows, kind, "base");
        out.push(check("contrastive", r.h_c >= 0.9 && r.pct_any >= 60.0, fmt_row(r)));
    }
    for kind in [ModelKind::Raw, ModelKind::Pca, ModelKind::Ae] {
        let r = row(&rows, kind, "base");
        out.push(check("baseline", r.pct_any <= 5.0, fmt_row(r)));
    }
    out.push(within("runtime", t.elapsed(), 600.0));
    out
}

fn q2_config(distractors: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(WorldKind::ShelfArrangement, 7);
    cfg.models = vec![ModelKind::PcSiamese];
    cfg.render.viewpoints = 1;
    cfg.render.distractors = distractors;
    cfg.augment.n = 1;
    cfg.hyper.d_m_siamese = 4.0;
    cfg
}

fn crit7() -> Vec<Check> {
    let t = Instant::now();
    let rows = run_experiment(&q2_config(5)).unwrap();
    let (base, aug) = (row(&rows, ModelKind::PcSiamese, "base"), row(&rows, ModelKind::PcSiamese, "aug"));
    let mut out = vec![check(
        "5 distractors",
        aug.pct_any > base.pct_any,
        format!("any {:.1} -> {:.1} with augmentation", base.pct_any, aug.pct_any),
    )];
    let rows = run_experiment(&q2_config(0)).unwrap();
    let aug = row(&rows, ModelKind::PcSiamese, "aug");
    out.push(check("0 distractors", aug.pct_any >= 90.0, fmt_row(aug)));
    out.push(within("runtime", t.elapsed(), 900.0));
    out
}

fn crit8() -> Vec<Check> {
    let (single, _) = loss_ntxent(&[vec![0.3, -1.0, 2.0], vec![-0.5, 0.1, 0.7]], &[1, 0], 0.5).unwrap();
    let e1 = vec![1.0, 0.0];
    let e2 = vec![0.0, 1.0];
    let (l, _) = loss_ntxent(&[e1.clone(), e1, e2.clone(), e2], &[1, 0, 3, 2], 1.0).unwrap();
    let e = std::f64::consts::E;
    let expected = -(e / (e + 2.0)).ln();
    vec![
        check("N=1", single == 0.0, format!("loss {single}")),
        check("N=2 orthonormal", (l - expected).abs() < 1e-9, format!("{l:.12} vs {expected:.12}")),
    ]
}

fn crit9() -> Vec<Check> {
    let mut cfg = ExperimentConfig::new(WorldKind::BoxStacking, 9);
    cfg.models = vec![ModelKind::Pca, ModelKind::Ae, ModelKind::PcSiamese, ModelKind::CeSiamese];
    cfg.dataset.n_tuples = 600;
    cfg.augment.n = 1;
    cfg.recon_epochs = Some(10);
    cfg.train.epochs = 10;
    cfg.eval.trials = 200;
    let csv = |cfg: &ExperimentConfig| {
        let mut buf = Vec::new();
        write_results_csv(&run_experiment(cfg).unwrap(), &mut buf).unwrap();
        buf
    };
    let (a, b) = (csv(&cfg), csv(&cfg));
    vec![check(
        "byte-identical",
        a == b && !a.is_empty(),
        format!("{} bytes, {} rows", a.len(), a.iter().filter(|&&c| c == b'\n').count() - 1),
    )]
}

/// Cross-viewpoint 1-NN accuracy must stay below this multiple of chance.
const CROSS_VIEW_CHANCE_FACTOR: f64 = 2.0;

/// Supplementary: with two viewpoints, 1-NN state classification of raw
/// observations fitted on one viewpoint and queried on the other is near
/// chance, while the same classifier within one viewpoint is accurate.
fn raw_cross_view() -> Vec<Check> {
    let spec = WorldSpec::new(WorldKind::BoxStacking);
    let params = RenderParams::new(
        &spec,
        RenderConfig {
            viewpoints: 2,
            seed: 10,
            ..RenderConfig::default()
        },
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let states = enumerate_states(&spec);
    let mut sets: [Vec<(Vec<f64>, usize)>; 3] = Default::default();
    for (label, &st) in states.iter().enumerate() {
        for rep in 0..40 {
            let mut f = sample_factors(&params, &mut rng);
            // reference set, same-view queries, other-view queries
            let (set, view) = match rep % 4 {
                0 | 1 => (0, 0),
                2 => (1, 0),
                _ => (2, 1),
            };
            f.viewpoint = view;
            sets[set].push((render(&spec, st, &f, &params, &mut rng).unwrap(), label));
        }
    }
    let accuracy = |queries: &[(Vec<f64>, usize)]| {
        let hits = queries
            .iter()
            .filter(|(q, label)| {
                let nearest = sets[0]
                    .iter()
                    .min_by(|a, b| {
                        let da: f64 = a.0.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = b.0.iter().zip(q).map(|(x, y)| (x - y).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                nearest.1 == *label
            })
            .count();
        hits as f64 / queries.len() as f64
    };
    let chance = 1.0 / states.len() as f64;
    let (same, cross) = (accuracy(&sets[1]), accuracy(&sets[2]));
    vec![
        check("same view", same >= 0.9, format!("accuracy {same:.3}")),
        check(
            "cross view",
            cross <= CROSS_VIEW_CHANCE_FACTOR * chance,
            format!("accuracy {cross:.3}, chance {chance:.3}, limit {:.3}", CROSS_VIEW_CHANCE_FACTOR * chance),
        ),
    ]
}

fn main() {
    let criteria: [(usize, &str, Runner); 9] = [
        (1, "world exactness", crit1),
        (2, "oracle pipeline", crit2),
        (3, "gradient suite", crit3),
        (4, "clustering oracle equivalence", crit4),
        (5, "metric hand-cases", crit5),
        (6, "mixed-viewpoint reproduction", crit6),
        (7, "augmentation reproduction", crit7),
        (8, "NT-Xent exactness", crit8),
        (9, "determinism", crit9),
    ];
    let supplementary: [(&str, Runner); 1] = [("raw observations across viewpoints", raw_cross_view)];
    let all = criteria
        .iter()
        .map(|&(id, title, run)| (format!("criterion {id}"), id.to_string(), title, run))
        .chain(supplementary.iter().map(|&(title, run)| ("supplementary".to_string(), "s".to_string(), title, run)));
    let mut unexpected = Vec::new();
    for (heading, id, title, run) in all {
        let checks = run();
        let pass = checks.iter().all(|c| c.ok);
        println!("{} {heading}: {title}", if pass { "PASS" } else { "FAIL" });
        for c in &checks {
            let key = format!("{id}/{}", c.name);
            let known = KNOWN_DEVIATIONS.contains(&key.as_str());
            let mark = match (c.ok, known) {
                (true, _) => "ok",
                (false, true) => "FAIL (known deviation)",
                (false, false) => "FAIL",
            };
            println!("    {mark:<22} {:<16} {}", c.name, c.detail);
            if !c.ok && !known {
                unexpected.push(key);
            }
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}
