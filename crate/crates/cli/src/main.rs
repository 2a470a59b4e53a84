//! Batch experiment runner: single runs, missing-ratio sweeps, ablations,
//! and synthetic dataset generation.

mod experiment;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cgir", about = "Attribute-missing graph clustering experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DatasetArgs {
    /// Edge list file (one `src<TAB>dst[<TAB>weight]` per line).
    #[arg(long)]
    edges: Option<PathBuf>,
    /// Feature matrix (headerless CSV or CGIRMAT1 binary).
    #[arg(long)]
    features: Option<PathBuf>,
    /// Label file (one integer per line).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Synthetic dataset instead of files:
    /// "n=300,c=3,p_in=0.1,p_out=0.01,d=16,sep=8,seed=7".
    #[arg(long, conflicts_with_all = ["edges", "features", "labels"])]
    synth: Option<String>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Training configuration file (TOML, flat keys named after the config
    /// fields). Command-line flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Missing ratio in [0, 1).
    #[arg(long, default_value_t = 0.2)]
    ratio: f64,
    /// Repeats per ratio (each with its own derived seed).
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Base seed; per-run seeds derive from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Max concurrent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Ablation: disable generative imputation and the adversarial game.
    #[arg(long)]
    wo_gi: bool,
    /// Ablation: disable the edge-attention stack and the contrastive term.
    #[arg(long)]
    wo_ea: bool,
    /// Ablation: drop the subcluster compactness term from the objective.
    #[arg(long)]
    wo_sl: bool,
}

#[derive(Args, Clone)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated missing ratios; default 0.0..=0.9 step 0.1.
    #[arg(long)]
    ratios: Option<String>,
}

#[derive(Args, Clone)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = 300)]
    pub nodes: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.1)]
    pub p_in: f64,
    #[arg(long, default_value_t = 0.01)]
    pub p_out: f64,
    /// Attribute dimension.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Class-mean separation of the Gaussian attributes.
    #[arg(long, default_value_t = 8.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (writes edges.txt, features.csv, labels.txt).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate at one missing ratio.
    Run(RunArgs),
    /// Train and evaluate across a grid of missing ratios; consolidates the
    /// per-ratio metrics into one plot-ready CSV.
    Sweep(SweepArgs),
    /// Generate a planted-partition benchmark dataset on disk.
    GenSynth(GenSynthArgs),
}

impl RunArgs {
    fn into_spec(self, ratios: Vec<f64>, consolidate: bool) -> experiment::ExperimentSpec {
        experiment::ExperimentSpec {
            dataset: experiment::DatasetSource {
                edges: self.dataset.edges,
                features: self.dataset.features,
                labels: self.dataset.labels,
                synth: self.dataset.synth,
            },
            config_path: self.config,
            ratios,
            repeats: self.repeats,
            seed: self.seed,
            out: self.out,
            jobs: self.jobs.max(1),
            wo_gi: self.wo_gi,
            wo_ea: self.wo_ea,
            wo_sl: self.wo_sl,
            consolidate,
        }
    }
}

fn parse_ratio_list(list: &str) -> Result<Vec<f64>, experiment::CliError> {
    let mut out = Vec::new();
    for piece in list.split(',') {
        let r: f64 = piece.trim().parse().map_err(|_| experiment::CliError {
            message: format!("invalid ratio {piece:?}"),
            exit_code: 2,
        })?;
        out.push(r);
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => {
            let ratio = args.ratio;
            experiment::run(args.into_spec(vec![ratio], false))
        }
        Command::Sweep(args) => {
            let ratios = match &args.ratios {
                None => Ok((0..10).map(|i| i as f64 / 10.0).collect()),
                Some(list) => parse_ratio_list(list),
            };
            match ratios {
                Ok(ratios) => experiment::run(args.run.into_spec(ratios, true)),
                Err(e) => Err(e),
            }
        }
        Command::GenSynth(args) => experiment::gen_synth(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.exit_code)
        }
    }
}
