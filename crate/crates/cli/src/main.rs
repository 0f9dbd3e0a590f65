//! `metabias`: pooling, publication-bias model averaging, meta-regression
//! and moderator screening from a dataset CSV.

mod commands;
mod manifest;

use clap::error::ErrorKind as ClapKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

use metabias_core::{Error, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "metabias", version, about = "Meta-analysis of reported effect sizes", propagate_version = true)]
struct Cli {
    /// Cap on worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Precision-weighted mean with study-clustered inference (pool.json).
    Pool(InputArgs),
    /// Funnel scatter and pseudo-confidence band around the pooled mean (funnel.csv).
    Funnel(InputArgs),
    /// Model-averaged publication-bias ensemble (ensemble.json, weightfn.csv).
    Bias(BiasArgs),
    /// Three-level REML meta-regression (metareg.csv, metareg.json).
    Metareg(MetaregArgs),
    /// Bayesian model averaging moderator screen (screen.csv).
    Screen(ScreenArgs),
    /// Simulated dataset with known truth (dataset.csv, simulation.json).
    Simulate(SimulateArgs),
    /// Outlier screen, describe, pool, bias, screen, then metareg on the screened moderators.
    Full(FullArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct InputArgs {
    /// Dataset CSV: study_id, theta, se, optional estimate_id, moderator columns.
    #[arg(long)]
    #[serde(skip)]
    pub input: PathBuf,
    /// Moderator schema JSON, a list of {"name", "kind": "binary"|"continuous"}.
    /// Inferred from the CSV when omitted (0/1 columns become binary).
    #[arg(long)]
    #[serde(skip)]
    pub schema: Option<PathBuf>,
    /// Keep estimates more than ten IQRs from the median of theta or se.
    #[arg(long)]
    pub no_outlier_filter: bool,
    /// Directory for result files and manifest.json.
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out_dir: PathBuf,
    /// Seed for every random stream of the run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SamplerArgs {
    /// MCMC chains per model.
    #[arg(long, default_value_t = 4)]
    pub chains: usize,
    /// Iterations per chain, burn-in included.
    #[arg(long, default_value_t = 5000)]
    pub iters: usize,
    /// Burn-in iterations per chain (proposal adaptation happens only here).
    #[arg(long, default_value_t = 1000)]
    pub burn_in: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct BiasArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct MetaregArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    /// Comma-separated moderators (default: every schema moderator).
    #[arg(long, value_delimiter = ',')]
    pub moderators: Option<Vec<String>>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ScreenOptions {
    /// Comma-separated regressors present in every model ("se" is the standard error).
    #[arg(long, value_delimiter = ',', default_value = "se")]
    pub forced: Vec<String>,
    /// Posterior inclusion probability needed to keep a moderator.
    #[arg(long, default_value_t = 0.1)]
    pub threshold: f64,
    /// Weight observations by inverse sampling variance in the screen.
    #[arg(long)]
    pub precision_weighted: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ScreenArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    /// Comma-separated candidate moderators (default: every schema moderator not forced).
    #[arg(long, value_delimiter = ',')]
    pub moderators: Option<Vec<String>>,
    #[command(flatten)]
    #[serde(flatten)]
    pub screen: ScreenOptions,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SimulateArgs {
    /// Simulation config JSON (default: built-in defaults).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct FullArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub sampler: SamplerArgs,
    /// Comma-separated screen candidates (default: every schema moderator not forced).
    #[arg(long, value_delimiter = ',')]
    pub moderators: Option<Vec<String>>,
    #[command(flatten)]
    #[serde(flatten)]
    pub screen: ScreenOptions,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => 1,
        ErrorKind::Numerical => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ClapKind::DisplayHelp | ClapKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if let Some(jobs) = cli.jobs {
        let built = (jobs > 0)
            .then(|| rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().ok())
            .flatten();
        if built.is_none() {
            eprintln!("error: --jobs must be a positive integer");
            return ExitCode::from(1);
        }
    }
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NonConvergence { trace, .. } = &e {
                for line in trace.iter().rev().take(10).rev() {
                    eprintln!("  {line}");
                }
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
