//! Experiment orchestration: configuration, the dataset → train → roadmap →
//! evaluation pipeline, persisted stage artifacts and report emission.

use std::collections::BTreeMap;
use std::fmt::{self, Display};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::cluster::hdbscan;
use crate::encoders::{
    encode, fit_pca, measure_action_distance, train, EncoderError, EncoderModel, Hyper, ModelKind,
};
use crate::io::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_dataset_csv, IoError};
use crate::lsr::{build_lsr, build_reference_graph, LsrError};
use crate::metrics::{encode_dataset, evaluate, reference_truth, EvalConfig, EvalReport, Evaluation, MetricsError};
use crate::nn::TrainConfig;
use crate::synthgen::{augment, generate_dataset, split_holdout, Dataset, RenderConfig, RenderParams, SynthError};
use crate::worlds::{enumerate_states, legal_transitions, WorldKind, WorldSpec, WorldState};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] IoError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Lsr(#[from] LsrError),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// (De)serialises through `Display` / `FromStr`, so config files can use the
/// short names (`box-stacking`, `pcsia`).
mod via_str {
    use super::*;

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

mod via_str_vec {
    use super::*;

    pub fn serialize<T: Display, S: Serializer>(v: &[T], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| x.to_string()))
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<Vec<T>, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Tuples generated before the holdout split.
    pub n_tuples: usize,
    pub frac_action: f64,
    pub holdout_frac: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_tuples: 2500,
            frac_action: 0.5,
            holdout_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Random negatives per similar pair; 0 disables the augmented variant.
    pub n: usize,
    /// Models that get an extra row trained on the augmented data.
    #[serde(with = "via_str_vec")]
    pub models: Vec<ModelKind>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            n: 0,
            models: ModelKind::CONTRASTIVE.to_vec(),
        }
    }
}

/// Everything a run depends on. The master `seed` is required; every other
/// random stream (including the render seed) is derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(with = "via_str")]
    pub world: WorldKind,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_models", with = "via_str_vec")]
    pub models: Vec<ModelKind>,
    /// Epochs for the reconstruction-based models; `train.epochs` applies
    /// to the rest.
    #[serde(default = "default_recon_epochs")]
    pub recon_epochs: Option<usize>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_models() -> Vec<ModelKind> {
    ModelKind::SEVEN.to_vec()
}

fn default_recon_epochs() -> Option<usize> {
    Some(500)
}

impl ExperimentConfig {
    /// Defaults for `world` with the given seed.
    pub fn new(world: WorldKind, seed: u64) -> Self {
        ExperimentConfig {
            seed,
            world,
            out_dir: default_out_dir(),
            models: default_models(),
            recon_epochs: default_recon_epochs(),
            dataset: DatasetConfig::default(),
            render: RenderConfig::default(),
            augment: AugmentConfig::default(),
            hyper: Hyper::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serialisable")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.models.is_empty() {
            return bad("no models requested".into());
        }
        if self.dataset.n_tuples < 2 {
            return bad("dataset.n_tuples must be at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.dataset.frac_action) {
            return bad("dataset.frac_action must lie in [0, 1]".into());
        }
        if !(self.dataset.holdout_frac > 0.0 && self.dataset.holdout_frac < 1.0) {
            return bad("dataset.holdout_frac must lie in (0, 1)".into());
        }
        if self.recon_epochs == Some(0) {
            return bad("recon_epochs must be at least 1".into());
        }
        if self.eval.trials == 0 {
            return bad("eval.trials must be at least 1".into());
        }
        if self.eval.cluster.min_cluster_size < 2 {
            return bad("eval.cluster.min_cluster_size must be at least 2".into());
        }
        self.train.validate().map_err(CliError::Config)?;
        self.hyper.validate()?;
        RenderParams::new(&WorldSpec::new(self.world), self.render_config())?;
        Ok(())
    }

    /// Render settings with the derived render seed.
    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            seed: derive_seed(self.seed, "render"),
            ..self.render.clone()
        }
    }

    /// All (model, variant) jobs in output order: every model on the base
    /// data, then the augmented variants.
    pub fn jobs(&self) -> Vec<Job> {
        let mut jobs: Vec<Job> = self
            .models
            .iter()
            .map(|&kind| Job {
                kind,
                variant: Variant::Base,
            })
            .collect();
        if self.augment.n > 0 {
            jobs.extend(
                self.models
                    .iter()
                    .filter(|k| self.augment.models.contains(k))
                    .map(|&kind| Job {
                        kind,
                        variant: Variant::Augmented,
                    }),
            );
        }
        jobs
    }

    pub fn train_config(&self, job: Job) -> TrainConfig {
        let epochs = if job.kind.has_decoder() {
            self.recon_epochs.unwrap_or(self.train.epochs)
        } else {
            self.train.epochs
        };
        TrainConfig {
            epochs,
            seed: derive_seed(self.seed, &format!("train/{}", job.tag())),
            ..self.train.clone()
        }
    }
}

/// Deterministic sub-seed for a named stream.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then a splitmix64 finaliser
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Base,
    Augmented,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Augmented => "aug",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Job {
    pub kind: ModelKind,
    pub variant: Variant,
}

impl Job {
    /// File-name friendly identifier, e.g. `pcsia-aug`.
    pub fn tag(&self) -> String {
        format!("{}-{}", self.kind.name(), self.variant.name())
    }
}

impl fmt::Display for Job {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

/// The datasets of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: Dataset,
    pub holdout: Dataset,
    /// Training data with random negatives; present when augmentation is on.
    pub augmented: Option<Dataset>,
}

impl Datasets {
    pub fn for_variant(&self, v: Variant) -> &Dataset {
        match v {
            Variant::Base => &self.train,
            Variant::Augmented => self.augmented.as_ref().unwrap_or(&self.train),
        }
    }
}

pub fn generate_datasets(cfg: &ExperimentConfig) -> Result<Datasets, CliError> {
    let spec = WorldSpec::new(cfg.world);
    let params = RenderParams::new(&spec, cfg.render_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "data"));
    let full = generate_dataset(&spec, &params, cfg.dataset.n_tuples, cfg.dataset.frac_action, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "split"));
    let (train_ds, holdout) = split_holdout(&full, cfg.dataset.holdout_frac, &mut rng)?;
    let augmented = if cfg.augment.n > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "augment"));
        Some(augment(&train_ds, cfg.augment.n, &mut rng)?)
    } else {
        None
    };
    Ok(Datasets {
        train: train_ds,
        holdout,
        augmented,
    })
}

/// Outcome of training one job.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Trained {
    Model { model: EncoderModel, hyper: Hyper },
    Failed(String),
}

/// Trains jobs in order, reusing reconstruction models to measure the
/// PC-AE / PC-VAE margin when it is not configured.
pub struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a Datasets,
    cache: BTreeMap<Job, Trained>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a ExperimentConfig, data: &'a Datasets) -> Self {
        Trainer {
            cfg,
            data,
            cache: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, job: Job) -> Result<Trained, CliError> {
        if let Some(t) = self.cache.get(&job) {
            return Ok(t.clone());
        }
        let tuples = self.data.for_variant(job.variant).tuples();
        let mut hyper = self.cfg.hyper.clone();
        if matches!(job.kind, ModelKind::PcAe | ModelKind::PcVae) && hyper.d_m.is_none() {
            let base = Job {
                kind: if job.kind == ModelKind::PcAe {
                    ModelKind::Ae
                } else {
                    ModelKind::BetaVae
                },
                variant: job.variant,
            };
            match self.get(base)? {
                Trained::Model { model, .. } => {
                    let d_m = measure_action_distance(&model, tuples, hyper.distance)?;
                    if !(d_m > 0.0 && d_m.is_finite()) {
                        // a collapsed base model leaves no margin to enforce
                        let t = Trained::Failed(format!("degenerate margin {d_m} from {base}"));
                        self.cache.insert(job, t.clone());
                        return Ok(t);
                    }
                    hyper.d_m = Some(d_m);
                }
                Trained::Failed(reason) => {
                    let t = Trained::Failed(format!("margin model {base} failed: {reason}"));
                    self.cache.insert(job, t.clone());
                    return Ok(t);
                }
            }
        }
        let t = match train(job.kind, tuples, &self.cfg.train_config(job), &hyper) {
            Ok((model, _)) => Trained::Model { model, hyper },
            Err(EncoderError::Diverged { epoch }) => Trained::Failed(format!("diverged at epoch {epoch}")),
            Err(e) => return Err(e.into()),
        };
        self.cache.insert(job, t.clone());
        Ok(t)
    }
}

fn eval_rng(cfg: &ExperimentConfig, job: Job) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("eval/{}", job.tag())))
}

/// Evaluates a trained model; the roadmap is always built from the
/// non-augmented training tuples.
pub fn evaluate_job(
    cfg: &ExperimentConfig,
    data: &Datasets,
    job: Job,
    model: &EncoderModel,
) -> Result<Evaluation, CliError> {
    assert_eq!(data.train.n_augmented(), 0, "roadmaps are built from non-augmented tuples only");
    let mut rng = eval_rng(cfg, job);
    let mut ev = evaluate(model, &data.train, &data.holdout, &cfg.eval, &mut rng)?;
    label_report(&mut ev.report, cfg, job);
    Ok(ev)
}

fn label_report(r: &mut EvalReport, cfg: &ExperimentConfig, job: Job) {
    r.model = job.kind.label().to_string();
    r.variant = job.variant.name().to_string();
    r.world = cfg.world.name().to_string();
    r.seed = cfg.seed;
}

fn failed_report(cfg: &ExperimentConfig, job: Job, status: &str) -> EvalReport {
    let mut r = EvalReport::failed("", "", "", 0, status);
    label_report(&mut r, cfg, job);
    r
}

/// Everything a full run produces.
pub struct PipelineOutput {
    pub data: Datasets,
    pub jobs: Vec<(Job, Trained, Option<Evaluation>)>,
}

impl PipelineOutput {
    pub fn reports(&self) -> Vec<EvalReport> {
        self.jobs
            .iter()
            .map(|(_, _, ev)| ev.as_ref().expect("every job is evaluated").report.clone())
            .collect()
    }
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput, CliError> {
    cfg.validate()?;
    let data = generate_datasets(cfg)?;
    let mut jobs_out = Vec::new();
    {
        let mut trainer = Trainer::new(cfg, &data);
        for job in cfg.jobs() {
            let trained = trainer.get(job)?;
            let ev = match &trained {
                Trained::Model { model, .. } => evaluate_job(cfg, &data, job, model)?,
                Trained::Failed(reason) => Evaluation {
                    report: failed_report(cfg, job, reason),
                    graph: build_reference_graph(&[]),
                    labels: None,
                    roadmap: None,
                    truth: vec![],
                },
            };
            jobs_out.push((job, trained, Some(ev)));
        }
    }
    Ok(PipelineOutput { data, jobs: jobs_out })
}

/// Generates the data, trains and evaluates every job; one row per job, in
/// config order. A pure function of the configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<EvalReport>, CliError> {
    Ok(run_pipeline(cfg)?.reports())
}

/// Column order of the results table.
pub const RESULT_COLUMNS: [&str; 14] = [
    "model", "variant", "world", "seed", "|V|", "h_c", "c_e", "s_c", "|E|", "c_c", "% all", "% any",
    "noise", "status",
];

fn fmt_score(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:.4}")
    }
}

fn fmt_pct(v: f64) -> String {
    format!("{v:.2}")
}

/// Writes the results CSV.
pub fn write_results_csv<W: Write>(rows: &[EvalReport], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", RESULT_COLUMNS.join(","))?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.model,
            r.variant,
            r.world,
            r.seed,
            r.n_nodes,
            fmt_score(r.h_c),
            fmt_score(r.c_e),
            fmt_score(r.s_c),
            r.n_edges,
            fmt_score(r.c_c),
            fmt_pct(r.pct_all),
            fmt_pct(r.pct_any),
            fmt_score(r.noise_fraction),
            r.status.replace(',', ";"),
        )?;
    }
    Ok(())
}

/// Parses a CSV produced by [`write_results_csv`].
pub fn read_results_csv<R: BufRead>(r: R) -> Result<Vec<EvalReport>, CliError> {
    let bad = |m: String| CliError::Config(format!("results file: {m}"));
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| bad("empty".into()))?
        .map_err(|e| bad(e.to_string()))?;
    if header != RESULT_COLUMNS.join(",") {
        return Err(bad(format!("unexpected header `{header}`")));
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != RESULT_COLUMNS.len() {
            return Err(bad(format!("line {}: {} fields", n + 2, f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", n + 2)));
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("line {}: {e}", n + 2)));
        rows.push(EvalReport {
            model: f[0].into(),
            variant: f[1].into(),
            world: f[2].into(),
            seed: f[3].parse().map_err(|e| bad(format!("line {}: {e}", n + 2)))?,
            n_nodes: int(f[4])?,
            h_c: num(f[5])?,
            c_e: num(f[6])?,
            s_c: num(f[7])?,
            n_edges: int(f[8])?,
            c_c: num(f[9])?,
            pct_all: num(f[10])?,
            pct_any: num(f[11])?,
            noise_fraction: num(f[12])?,
            truncated: 0,
            unreachable: 0,
            status: f[13].into(),
        });
    }
    Ok(rows)
}

/// Markdown table with the best entry of each column in bold: the maximum
/// for scores and percentages, the closest to the true count for |V| and |E|.
pub fn results_markdown(rows: &[EvalReport], spec: &WorldSpec) -> String {
    let true_v = enumerate_states(spec).len() as f64;
    let true_e = legal_transitions(spec).len() as f64;
    type Getter = fn(&EvalReport) -> f64;
    let cols: [(&str, Getter, Option<f64>); 8] = [
        ("\\|V\\|", |r| r.n_nodes as f64, Some(true_v)),
        ("h_c", |r| r.h_c, None),
        ("c_e", |r| r.c_e, None),
        ("s_c", |r| r.s_c, None),
        ("\\|E\\|", |r| r.n_edges as f64, Some(true_e)),
        ("c_c", |r| r.c_c, None),
        ("% all", |r| r.pct_all, None),
        ("% any", |r| r.pct_any, None),
    ];
    // status "ok" rows compete for bold; NaN never wins
    let key = |r: &EvalReport, get: Getter, target: Option<f64>| -> Option<f64> {
        let v = get(r);
        if v.is_nan() || r.status != "ok" {
            return None;
        }
        Some(match target {
            Some(t) => -(v - t).abs(),
            None => v,
        })
    };
    let best: Vec<Option<f64>> = cols
        .iter()
        .map(|&(_, get, target)| {
            rows.iter()
                .filter_map(|r| key(r, get, target))
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
        })
        .collect();
    let mut out = String::new();
    out.push_str("| Model | Variant |");
    for (name, _, _) in &cols {
        out.push_str(&format!(" {name} |"));
    }
    out.push('\n');
    out.push_str("|---|---|");
    for _ in &cols {
        out.push_str("---:|");
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("| {} | {} |", r.model, r.variant));
        for (c, &(name, get, target)) in cols.iter().enumerate() {
            let v = get(r);
            let text = match name {
                "\\|V\\|" | "\\|E\\|" => format!("{}", v as usize),
                "% all" | "% any" => format!("{v:.1}"),
                _ if v.is_nan() => "–".into(),
                _ => format!("{v:.2}"),
            };
            let is_best = key(r, get, target).is_some() && key(r, get, target) == best[c];
            if is_best {
                out.push_str(&format!(" **{text}** |"));
            } else {
                out.push_str(&format!(" {text} |"));
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

pub fn emit_report(rows: &[EvalReport], format: ReportFormat, spec: &WorldSpec, path: &Path) -> Result<(), CliError> {
    if rows.is_empty() {
        return Err(CliError::Config("no rows to report".into()));
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    match format {
        ReportFormat::Csv => write_results_csv(rows, &mut w),
        ReportFormat::Markdown => w.write_all(results_markdown(rows, spec).as_bytes()),
    }
    .and_then(|_| w.flush())
    .map_err(io_err(path))
}

/// One point of a 2D projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub x: f64,
    pub y: f64,
    pub state: WorldState,
}

/// Projects encodings onto their top two principal directions.
pub fn export_projection(encodings: &[Vec<f64>], truth: &[WorldState]) -> Result<Vec<ProjectedPoint>, CliError> {
    if encodings.len() < 3 {
        return Err(CliError::DegenerateData(format!("{} points", encodings.len())));
    }
    if encodings.len() != truth.len() {
        return Err(CliError::DegenerateData("labels do not match points".into()));
    }
    if encodings[0].len() < 2 {
        return Err(CliError::DegenerateData("latent space is one-dimensional".into()));
    }
    let pca = fit_pca(encodings, 2).map_err(|e| CliError::DegenerateData(e.to_string()))?;
    if pca.degenerate {
        return Err(CliError::DegenerateData("encodings span fewer than two dimensions".into()));
    }
    Ok(encodings
        .iter()
        .zip(truth)
        .map(|(z, &state)| {
            let p = pca.project(z);
            ProjectedPoint { x: p[0], y: p[1], state }
        })
        .collect())
}

pub fn write_projection_csv<W: Write>(points: &[ProjectedPoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "x,y,state")?;
    for p in points {
        writeln!(w, "{},{},{}", p.x, p.y, p.state.0)?;
    }
    Ok(())
}

/// File layout under the output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout {
            root: root.to_path_buf(),
        }
    }

    pub fn dataset(&self, name: &str) -> (PathBuf, PathBuf) {
        let dir = self.root.join("data");
        (dir.join(format!("{name}.bin")), dir.join(format!("{name}.sidecar")))
    }

    pub fn checkpoint(&self, job: Job) -> PathBuf {
        self.root.join("models").join(format!("{}.ckpt", job.tag()))
    }

    pub fn failure_note(&self, job: Job) -> PathBuf {
        self.root.join("models").join(format!("{}.failed", job.tag()))
    }

    pub fn roadmap(&self, job: Job) -> (PathBuf, PathBuf, PathBuf) {
        let dir = self.root.join("lsr");
        let t = job.tag();
        (
            dir.join(format!("{t}.nodes.csv")),
            dir.join(format!("{t}.edges.csv")),
            dir.join(format!("{t}.labels.csv")),
        )
    }

    pub fn projection(&self, job: Job) -> PathBuf {
        self.root.join("projections").join(format!("{}.csv", job.tag()))
    }

    pub fn results_csv(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn results_md(&self) -> PathBuf {
        self.root.join("results.md")
    }

    fn ensure(&self, sub: &str) -> Result<(), CliError> {
        let d = self.root.join(sub);
        fs::create_dir_all(&d).map_err(io_err(&d))
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

/// Writes the datasets (and optional CSV exports) to the output directory.
pub fn save_datasets(data: &Datasets, layout: &Layout, csv: bool) -> Result<(), CliError> {
    layout.ensure("data")?;
    let mut sets = vec![("train", &data.train), ("holdout", &data.holdout)];
    if let Some(a) = &data.augmented {
        sets.push(("train_aug", a));
    }
    for (name, ds) in sets {
        let (bin, side) = layout.dataset(name);
        save_dataset(ds, &bin, &side)?;
        if csv {
            let path = layout.root.join("data").join(format!("{name}.csv"));
            let mut w = create(&path)?;
            write_dataset_csv(ds, &mut w).and_then(|_| w.flush()).map_err(io_err(&path))?;
        }
    }
    Ok(())
}

pub fn load_datasets(layout: &Layout, cfg: &ExperimentConfig) -> Result<Datasets, CliError> {
    let load = |name: &str| -> Result<Dataset, CliError> {
        let (bin, side) = layout.dataset(name);
        if !bin.exists() {
            return Err(CliError::Config(format!(
                "{} not found; run the `generate` stage first",
                bin.display()
            )));
        }
        Ok(load_dataset(&bin, &side)?)
    };
    Ok(Datasets {
        train: load("train")?,
        holdout: load("holdout")?,
        augmented: if cfg.augment.n > 0 { Some(load("train_aug")?) } else { None },
    })
}

pub fn save_trained(layout: &Layout, job: Job, trained: &Trained) -> Result<(), CliError> {
    layout.ensure("models")?;
    let note = layout.failure_note(job);
    match trained {
        Trained::Model { model, hyper } => {
            save_checkpoint(model, hyper, &layout.checkpoint(job))?;
            if note.exists() {
                fs::remove_file(&note).map_err(io_err(&note))?;
            }
        }
        Trained::Failed(reason) => fs::write(&note, reason).map_err(io_err(&note))?,
    }
    Ok(())
}

pub fn load_trained(layout: &Layout, job: Job) -> Result<Trained, CliError> {
    let note = layout.failure_note(job);
    if note.exists() {
        return Ok(Trained::Failed(fs::read_to_string(&note).map_err(io_err(&note))?));
    }
    let ckpt = layout.checkpoint(job);
    if !ckpt.exists() {
        return Err(CliError::Config(format!(
            "{} not found; run the `train` stage first",
            ckpt.display()
        )));
    }
    let (model, hyper) = load_checkpoint(&ckpt)?;
    Ok(Trained::Model { model, hyper })
}

/// Writes the roadmap and cluster labels of an evaluation.
pub fn save_roadmap(layout: &Layout, job: Job, ev: &Evaluation) -> Result<(), CliError> {
    layout.ensure("lsr")?;
    let (nodes, edges, labels) = layout.roadmap(job);
    if let Some(rm) = &ev.roadmap {
        let mut w = create(&nodes)?;
        rm.write_nodes_csv(&mut w).and_then(|_| w.flush()).map_err(io_err(&nodes))?;
        let mut w = create(&edges)?;
        rm.write_edges_csv(&mut w).and_then(|_| w.flush()).map_err(io_err(&edges))?;
    }
    if let Some(l) = &ev.labels {
        let mut w = create(&labels)?;
        l.write_csv(&mut w).and_then(|_| w.flush()).map_err(io_err(&labels))?;
    }
    Ok(())
}

/// Clusters the encoded training tuples and writes the roadmap, without
/// planning queries.
pub fn build_roadmap_only(
    cfg: &ExperimentConfig,
    data: &Datasets,
    job: Job,
    model: &EncoderModel,
) -> Result<Evaluation, CliError> {
    assert_eq!(data.train.n_augmented(), 0, "roadmaps are built from non-augmented tuples only");
    let mut rng = eval_rng(cfg, job);
    let encoded = encode_dataset(model, &data.train, &mut rng)?;
    let graph = build_reference_graph(&encoded);
    let truth = reference_truth(&graph, &data.train);
    let labels = hdbscan(&graph.points, &cfg.eval.cluster).map_err(MetricsError::from)?;
    let roadmap = match build_lsr(&graph, &labels) {
        Ok(rm) => Some(rm),
        Err(LsrError::NoClusters) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(Evaluation {
        report: failed_report(cfg, job, "not-evaluated"),
        graph,
        labels: Some(labels),
        roadmap,
        truth,
    })
}

/// Writes the 2D projection of a model's training encodings.
pub fn save_projection(layout: &Layout, job: Job, data: &Datasets, model: &EncoderModel) -> Result<(), CliError> {
    layout.ensure("projections")?;
    let mut z = Vec::new();
    let mut truth = Vec::new();
    for (t, s) in data.train.tuples.iter().zip(&data.train.sidecar) {
        z.push(encode(model, &t.o_i)?);
        z.push(encode(model, &t.o_j)?);
        truth.push(s.state_i);
        truth.push(s.state_j);
    }
    let pts = export_projection(&z, &truth)?;
    let path = layout.projection(job);
    let mut w = create(&path)?;
    write_projection_csv(&pts, &mut w).and_then(|_| w.flush()).map_err(io_err(&path))
}

/// Runs everything and writes every artifact; returns the report rows.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<EvalReport>, CliError> {
    let layout = Layout::new(&cfg.out_dir);
    fs::create_dir_all(&layout.root).map_err(io_err(&layout.root))?;
    let out = run_pipeline(cfg)?;
    save_datasets(&out.data, &layout, false)?;
    for (job, trained, ev) in &out.jobs {
        save_trained(&layout, *job, trained)?;
        if let Some(ev) = ev {
            save_roadmap(&layout, *job, ev)?;
        }
        if let Trained::Model { model, .. } = trained {
            if let Err(e) = save_projection(&layout, *job, &out.data, model) {
                eprintln!("warning: no projection for {job}: {e}");
            }
        }
    }
    let rows = out.reports();
    let spec = WorldSpec::new(cfg.world);
    emit_report(&rows, ReportFormat::Csv, &spec, &layout.results_csv())?;
    emit_report(&rows, ReportFormat::Markdown, &spec, &layout.results_md())?;
    Ok(rows)
}

/// Reads a results CSV from disk.
pub fn load_results(path: &Path) -> Result<Vec<EvalReport>, CliError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    read_results_csv(BufReader::new(f))
}

/// `generate` stage: datasets to `data/`.
pub fn stage_generate(cfg: &ExperimentConfig, csv: bool) -> Result<Datasets, CliError> {
    let data = generate_datasets(cfg)?;
    save_datasets(&data, &Layout::new(&cfg.out_dir), csv)?;
    Ok(data)
}

/// `train` stage: one checkpoint (or failure note) per job in `models/`.
pub fn stage_train(cfg: &ExperimentConfig) -> Result<Vec<(Job, Trained)>, CliError> {
    let layout = Layout::new(&cfg.out_dir);
    let data = load_datasets(&layout, cfg)?;
    let mut trainer = Trainer::new(cfg, &data);
    let mut out = Vec::new();
    for job in cfg.jobs() {
        let t = trainer.get(job)?;
        save_trained(&layout, job, &t)?;
        out.push((job, t));
    }
    Ok(out)
}

/// `build-lsr` stage: roadmap and cluster labels per trained job in `lsr/`.
pub fn stage_build_lsr(cfg: &ExperimentConfig) -> Result<Vec<(Job, Option<Evaluation>)>, CliError> {
    let layout = Layout::new(&cfg.out_dir);
    let data = load_datasets(&layout, cfg)?;
    let mut out = Vec::new();
    for job in cfg.jobs() {
        let ev = match load_trained(&layout, job)? {
            Trained::Model { model, .. } => {
                let ev = build_roadmap_only(cfg, &data, job, &model)?;
                save_roadmap(&layout, job, &ev)?;
                Some(ev)
            }
            Trained::Failed(_) => None,
        };
        out.push((job, ev));
    }
    Ok(out)
}

/// `eval` stage: evaluates the checkpoints and writes `results.csv`.
pub fn stage_eval(cfg: &ExperimentConfig) -> Result<Vec<EvalReport>, CliError> {
    let layout = Layout::new(&cfg.out_dir);
    let data = load_datasets(&layout, cfg)?;
    let mut rows = Vec::new();
    for job in cfg.jobs() {
        rows.push(match load_trained(&layout, job)? {
            Trained::Model { model, .. } => evaluate_job(cfg, &data, job, &model)?.report,
            Trained::Failed(reason) => failed_report(cfg, job, &reason),
        });
    }
    emit_report(&rows, ReportFormat::Csv, &WorldSpec::new(cfg.world), &layout.results_csv())?;
    Ok(rows)
}

/// `report` stage: renders `results.csv` as `results.md`; returns the table.
pub fn stage_report(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let layout = Layout::new(&cfg.out_dir);
    let rows = load_results(&layout.results_csv())?;
    let spec = WorldSpec::new(cfg.world);
    emit_report(&rows, ReportFormat::Markdown, &spec, &layout.results_md())?;
    Ok(results_markdown(&rows, &spec))
}

/// `project` stage: 2D projections of the training encodings per job.
pub fn stage_project(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let layout = Layout::new(&cfg.out_dir);
    let data = load_datasets(&layout, cfg)?;
    for job in cfg.jobs() {
        if let Trained::Model { model, .. } = load_trained(&layout, job)? {
            save_projection(&layout, job, &data, &model)?;
        }
    }
    Ok(())
}
