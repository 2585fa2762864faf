use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mahgnn_core::pipeline::{run_stage, Manifest, Overrides, PipelineConfig, Stage, REPORT_FILE, STATS_FILE, TABLE_FILE};
use mahgnn_core::synthgen::SynthSpec;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Ponzi contract detection with multi-view augmented heterogeneous GNNs.
#[derive(Debug, Parser)]
#[command(name = "mahgnn", version)]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply to missing sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Work directory holding one sub-directory per stage.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Default)]
struct Out {
    /// Output directory (default: the stage directory under the workdir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic records/labels dataset with planted Ponzi contracts.
    Synth {
        /// Synthetic spec (TOML); replaces the [synth] config section.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[command(flatten)]
        out: Out,
    },
    /// Build the interaction graph from records and seed labels.
    BuildGraph {
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// `id,kind[,label]` account-type declarations.
        #[arg(long)]
        accounts: Option<PathBuf>,
        /// Share of second-order edges kept per count group.
        #[arg(long)]
        k: Option<f64>,
        /// Number of sampled negative seeds.
        #[arg(long)]
        neg: Option<usize>,
        #[command(flatten)]
        out: Out,
    },
    /// Extract the 14 account features and fit the standardizer.
    Features {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[command(flatten)]
        out: Out,
    },
    /// Pre-train one CVAE per triplet relation.
    PretrainCvae {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[command(flatten)]
        out: Out,
    },
    /// Generate the augmented feature views.
    Augment {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        cvae: Option<PathBuf>,
        #[arg(long)]
        views: Option<usize>,
        #[command(flatten)]
        out: Out,
    },
    /// Grid-search and train the classifier over several runs.
    Train {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        cvae: Option<PathBuf>,
        #[arg(long)]
        augment: Option<PathBuf>,
        #[command(flatten)]
        out: Out,
    },
    /// Re-evaluate a trained checkpoint on a graph.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[command(flatten)]
        out: Out,
    },
    /// Print account and relation counts of a graph.
    Stats {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[command(flatten)]
        out: Out,
    },
    /// Run every stage in order.
    Run,
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    if let Some(dir) = &cli.workdir {
        cfg.paths.workdir = dir.clone();
    }
    Ok(cfg)
}

fn report(stage: Stage, manifest: &Manifest, dir: &std::path::Path) -> anyhow::Result<()> {
    println!("{stage}: {} output(s) in {}", manifest.outputs.len(), dir.display());
    let show = match stage {
        Stage::Train | Stage::Eval => Some(TABLE_FILE),
        Stage::Stats | Stage::BuildGraph => Some(STATS_FILE),
        _ => None,
    };
    if let Some(name) = show {
        let text = std::fs::read_to_string(dir.join(name)).with_context(|| format!("reading {name}"))?;
        print!("{text}");
    }
    if stage == Stage::Eval {
        println!("report: {}", dir.join(REPORT_FILE).display());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    let mut ov = Overrides::default();
    let stage = match cli.command {
        Command::Synth { spec, out } => {
            if let Some(path) = spec {
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                cfg.synth = Some(SynthSpec::from_toml(&text)?);
            } else if cfg.synth.is_none() {
                cfg.synth = Some(SynthSpec::default());
            }
            ov.out = out.out;
            Stage::Synth
        }
        Command::BuildGraph { records, labels, accounts, k, neg, out } => {
            ov.records = records;
            ov.labels = labels;
            ov.accounts = accounts;
            if let Some(k) = k {
                cfg.dataset.k = k;
            }
            if let Some(n) = neg {
                cfg.dataset.negatives = n;
            }
            ov.out = out.out;
            Stage::BuildGraph
        }
        Command::Features { graph, out } => {
            ov.graph = graph;
            ov.out = out.out;
            Stage::Features
        }
        Command::PretrainCvae { graph, features, out } => {
            ov.graph = graph;
            ov.features = features;
            ov.out = out.out;
            Stage::PretrainCvae
        }
        Command::Augment { graph, features, cvae, views, out } => {
            ov.graph = graph;
            ov.features = features;
            ov.cvae = cvae;
            if let Some(m) = views {
                cfg.augment.views = m;
            }
            ov.out = out.out;
            Stage::Augment
        }
        Command::Train { graph, features, cvae, augment, out } => {
            ov.graph = graph;
            ov.features = features;
            ov.cvae = cvae;
            ov.augment = augment;
            ov.out = out.out;
            Stage::Train
        }
        Command::Eval { checkpoint, graph, out } => {
            ov.checkpoint = checkpoint;
            ov.graph = graph;
            ov.out = out.out;
            Stage::Eval
        }
        Command::Stats { graph, out } => {
            ov.graph = graph;
            ov.out = out.out;
            Stage::Stats
        }
        Command::Run => {
            if cfg.synth.is_none() && cfg.paths.records.is_none() {
                cfg.synth = Some(SynthSpec::default());
            }
            for stage in mahgnn_core::pipeline::pipeline_stages(&cfg) {
                let manifest = run_stage(stage, &cfg, &ov)?;
                report(stage, &manifest, &cfg.resolved().stage_dir(stage))?;
            }
            return Ok(());
        }
    };
    let manifest = run_stage(stage, &cfg, &ov)?;
    let dir = ov.out.clone().unwrap_or_else(|| cfg.resolved().stage_dir(stage));
    report(stage, &manifest, &dir)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            match err.downcast_ref::<mahgnn_core::Error>() {
                Some(e) => eprintln!("error[{}]: {err:#}", e.kind()),
                None => eprintln!("error: {err:#}"),
            }
            ExitCode::from(2)
        }
    }
}
