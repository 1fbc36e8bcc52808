//! `bplink`: train, score, and evaluate sparse bipartite link-prediction
//! models from the command line.
//!
//! Every run draws all of its randomness from one `--seed`, resolves its
//! settings as flag > `--config` TOML > built-in default, and writes a
//! `run.json` manifest echoing the resolved settings, so reruns with the
//! same manifest reproduce outputs byte for byte at any thread count.
//!
//! Exit codes: 0 on success; 2 when a fit hit its sweep limit before the
//! ELBO tolerance (outputs are still written); 1 for every other failure.

mod commands;
mod config;
mod inputs;
mod scorer;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bplink::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{pick, pick_opt, FileConfig};

#[derive(Parser)]
#[command(
    name = "bplink",
    version,
    about = "Sparse link prediction on bipartite graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model; write a state checkpoint, point estimates, and an ELBO trace.
    Train(commands::train::TrainArgs),
    /// Score user-host pairs with a trained model or a graph baseline.
    Score(commands::score::ScoreArgs),
    /// Rank test edges against non-edges and report AUC per category.
    Eval(commands::eval::EvalArgs),
    /// Draw a synthetic ground truth with matching observation graphs.
    Simulate(commands::simulate::SimulateArgs),
    /// Singular-value profile of a graph, for choosing the rank.
    Scree(commands::scree::ScreeArgs),
    /// Refit without each covariate group and report the AUC it was worth.
    Ablate(commands::ablate::AblateArgs),
}

/// Flags shared by every subcommand.
#[derive(Args)]
pub struct CommonArgs {
    /// TOML file of defaults; explicit flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; every random stream in the run derives from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism). Results do not
    /// depend on this.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Directory for output files (created if missing).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Common settings after layering flags over the config file.
pub struct Resolved {
    pub cfg: FileConfig,
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
}

pub fn resolve_common(common: &CommonArgs) -> Result<Resolved> {
    let cfg = FileConfig::load(common.config.as_deref())?;
    let seed = pick(common.seed, cfg.u64("seed")?, 0);
    if let Some(n) = pick_opt(common.threads, cfg.usize("threads")?) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    let threads = rayon::current_num_threads();
    let out = pick(common.out.clone(), cfg.path("out")?, PathBuf::from("."));
    std::fs::create_dir_all(&out)?;
    Ok(Resolved {
        cfg,
        seed,
        threads,
        out,
    })
}

/// `run.json`: the resolved configuration echo plus the convergence flag.
#[derive(Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub seed: u64,
    pub threads: usize,
    pub converged: bool,
    pub settings: serde_json::Value,
    pub outputs: Vec<String>,
}

pub fn write_manifest(out_dir: &Path, manifest: &RunManifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest)?;
    bytes.push(b'\n');
    std::fs::write(out_dir.join("run.json"), bytes)?;
    Ok(())
}

/// What a successful command reports back to the exit-code mapping.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Nonconverged,
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Train(args) => commands::train::run(args),
        Command::Score(args) => commands::score::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Simulate(args) => commands::simulate::run(args),
        Command::Scree(args) => commands::scree::run(args),
        Command::Ablate(args) => commands::ablate::run(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version print to stdout and succeed; real usage
            // errors take the generic failure code.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Nonconverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
