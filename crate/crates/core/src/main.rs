use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use latent_roadmap::cli::{
    run_all, stage_build_lsr, stage_eval, stage_generate, stage_project, stage_report, stage_train,
    CliError, ExperimentConfig, Trained,
};
use latent_roadmap::encoders::ModelKind;
use latent_roadmap::worlds::{write_edge_list, WorldKind, WorldSpec};

/// Latent space roadmaps on synthetic combinatorial worlds.
#[derive(Parser)]
#[command(name = "latent-roadmap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training, holdout and augmented datasets.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Also write the datasets as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Train every requested model on the generated data.
    Train(Common),
    /// Cluster the encodings and write roadmaps and labels.
    BuildLsr(Common),
    /// Evaluate the trained models and write results.csv.
    Eval(Common),
    /// Render results.csv as a Markdown table.
    Report(Common),
    /// Export 2D projections of the latent encodings.
    Project(Common),
    /// Run every stage in sequence.
    All(Common),
    /// Print a world's transition graph as "state_a state_b" bitmask pairs.
    WorldGraph {
        /// bm, sa or bs (or the long names).
        world: WorldKind,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the model list, e.g. `pca,pcsia`.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<ModelKind>>,
    /// Override the number of planning queries.
    #[arg(long)]
    trials: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(m) = &self.models {
            cfg.models = m.clone();
        }
        if let Some(t) = self.trials {
            cfg.eval.trials = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_rows(rows: &[latent_roadmap::metrics::EvalReport]) {
    for r in rows {
        println!(
            "{:<8} {:<4} |V|={:<4} |E|={:<5} h_c={:.3} c_c={:.3} c_e={:.3} all={:.1} any={:.1} {}",
            r.model, r.variant, r.n_nodes, r.n_edges, r.h_c, r.c_c, r.c_e, r.pct_all, r.pct_any, r.status
        );
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common, csv } => {
            let cfg = common.load()?;
            let data = stage_generate(&cfg, csv)?;
            println!(
                "train {} tuples, holdout {}, augmented {}",
                data.train.len(),
                data.holdout.len(),
                data.augmented.as_ref().map_or(0, |d| d.len())
            );
        }
        Command::Train(common) => {
            let cfg = common.load()?;
            for (job, t) in stage_train(&cfg)? {
                match t {
                    Trained::Model { .. } => println!("{job}: trained"),
                    Trained::Failed(reason) => println!("{job}: failed ({reason})"),
                }
            }
        }
        Command::BuildLsr(common) => {
            let cfg = common.load()?;
            for (job, ev) in stage_build_lsr(&cfg)? {
                match ev.as_ref().and_then(|e| e.roadmap.as_ref()) {
                    Some(rm) => println!("{job}: {} nodes, {} edges", rm.n_nodes(), rm.n_edges()),
                    None => println!("{job}: no roadmap"),
                }
            }
        }
        Command::Eval(common) => print_rows(&stage_eval(&common.load()?)?),
        Command::Report(common) => print!("{}", stage_report(&common.load()?)?),
        Command::Project(common) => stage_project(&common.load()?)?,
        Command::All(common) => print_rows(&run_all(&common.load()?)?),
        Command::WorldGraph { world } => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            write_edge_list(&WorldSpec::new(world), &mut lock)
                .and_then(|_| lock.flush())
                .map_err(|source| CliError::Io {
                    path: PathBuf::from("<stdout>"),
                    source,
                })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
