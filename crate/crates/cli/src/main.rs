//! `crosscoherence`: the full metric pipeline from the shell, from synthetic
//! data generation through evaluation reports.

mod commands;
mod config;
mod workspace;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{EvalSplit, ProviderKind, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "crosscoherence", version, about = "Text-to-shape coherence metric pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stage; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; overrides the config.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run directory holding every artifact.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Manifest to use instead of `<out>/data/manifest.jsonl`.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ScorerKind {
    /// The trained scorer in `<out>/scorer.ckpt`.
    Model,
    /// Ground-truth attribute matching (synthetic data only).
    Oracle,
    /// Seeded uniform scores.
    Random,
}

impl ScorerKind {
    fn name(self) -> &'static str {
        match self {
            ScorerKind::Model => "model",
            ScorerKind::Oracle => "oracle",
            ScorerKind::Random => "random",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic furniture dataset into `<out>/data`.
    GenSynthetic {
        #[arg(long)]
        chairs: Option<usize>,
        #[arg(long)]
        tables: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Train the reconstruction autoencoder on the training split.
    TrainAe {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Mine hard and easy distractors in autoencoder latent space.
    Mine,
    /// Build triplets for every split from the mined distractors.
    BuildTriplets {
        #[arg(long)]
        group_size: Option<usize>,
    },
    /// Train the coherence scorer.
    TrainCc {
        #[arg(long)]
        epochs: Option<usize>,
        /// Candidates per training group.
        #[arg(long)]
        group_size: Option<usize>,
    },
    /// Pairwise protocol over the evaluation split.
    EvalPairwise {
        #[arg(long, value_enum, default_value = "model")]
        scorer: ScorerKind,
        #[arg(long, value_enum)]
        split: Option<EvalSplit>,
    },
    /// R-precision protocol over the evaluation split.
    EvalRprecision {
        #[arg(long, value_enum, default_value = "model")]
        scorer: ScorerKind,
        #[arg(long, value_enum)]
        split: Option<EvalSplit>,
        /// Captions per ranking, the true one included.
        #[arg(long)]
        set_size: Option<usize>,
    },
    /// Rewrite every shape's captions with a completion provider.
    Refine {
        #[arg(long, value_enum)]
        provider: Option<ProviderKind>,
    },
    /// Summarize every evaluation report in the run directory.
    Report,
    /// Every stage from data generation to the report.
    Run {
        #[arg(long, value_enum)]
        provider: Option<ProviderKind>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(err) = real_main() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn real_main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.global.workers {
        cfg.workers = Some(workers);
    }
    if let Some(n) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot start the worker pool")?;
    }
    let ws = workspace::Workspace::new(&cli.global.out, cli.global.manifest.clone());
    match cli.command {
        Command::GenSynthetic { chairs, tables, points } => {
            if let Some(v) = chairs {
                cfg.synthetic.chairs = v;
            }
            if let Some(v) = tables {
                cfg.synthetic.tables = v;
            }
            if let Some(v) = points {
                cfg.synthetic.points = v;
            }
            commands::gen_synthetic(&ws, &cfg)
        }
        Command::TrainAe { steps } => {
            if let Some(v) = steps {
                cfg.autoencoder.steps = v;
            }
            commands::train_ae(&ws, &cfg)
        }
        Command::Mine => commands::mine(&ws, &cfg),
        Command::BuildTriplets { group_size } => {
            if let Some(v) = group_size {
                cfg.triplets.group_size = v;
            }
            commands::build_triplets(&ws, &cfg)
        }
        Command::TrainCc { epochs, group_size } => {
            if let Some(v) = epochs {
                cfg.fit.epochs = v;
            }
            if let Some(v) = group_size {
                cfg.fit.group_size = v;
            }
            commands::train_cc(&ws, &cfg)
        }
        Command::EvalPairwise { scorer, split } => {
            if let Some(s) = split {
                cfg.eval.split = s;
            }
            commands::eval_pairwise(&ws, &cfg, scorer).map(|_| ())
        }
        Command::EvalRprecision { scorer, split, set_size } => {
            if let Some(s) = split {
                cfg.eval.split = s;
            }
            if let Some(n) = set_size {
                cfg.eval.set_size = n;
            }
            commands::eval_rprecision(&ws, &cfg, scorer).map(|_| ())
        }
        Command::Refine { provider } => {
            if let Some(p) = provider {
                cfg.refine.provider = p;
            }
            commands::refine(&ws, &cfg)
        }
        Command::Report => commands::report(&ws),
        Command::Run { provider } => {
            if let Some(p) = provider {
                cfg.refine.provider = p;
            }
            commands::run_all(&ws, &cfg)
        }
    }
}
