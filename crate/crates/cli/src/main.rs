//! `dmrec` command-line runner.
//!
//! Exit codes: 0 success, 2 usage/config/data errors, 3 numeric failure (a `diagnostics.json`
//! is written to the output directory).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmrec::evaluation::Split;
use dmrec::matching::{Ablation, Strategy};

#[derive(Parser, Debug)]
#[command(name = "dmrec", version, about = "Semantic distribution matching for VAE recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a cluster-structured synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write checkpoint, history and resolved config.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation or test split.
    Eval(EvalArgs),
    /// Write the per-dimension activity of the posterior means.
    Diagnose(DiagnoseArgs),
    /// Train one run per beta and report validation/test Recall@20.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 400)]
    users: usize,
    #[arg(long, default_value_t = 200)]
    items: usize,
    #[arg(long, default_value_t = 5)]
    clusters: usize,
    #[arg(long, default_value_t = 0.08)]
    p_in: f64,
    #[arg(long, default_value_t = 0.005)]
    p_out: f64,
    #[arg(long, default_value_t = 32)]
    embedding_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    informative: bool,
    /// Falls back to DMREC_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// Overrides applied on top of the config file.
#[derive(Args, Debug, Clone, Default)]
struct Overrides {
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Add the sparsity-group table.
    #[arg(long)]
    groups: bool,
    /// Group edges `a,b,c` on training degree; defaults to quartiles.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    group_edges: Option<Vec<usize>>,
    /// Also write per-user metrics as CSV.
    #[arg(long)]
    per_user: bool,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated betas, or `first,second,...,last`.
    #[arg(long)]
    beta_grid: String,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy)]
enum SplitArg {
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, result) = match cli.command {
        Command::Synth(a) => ("synth", commands::synth(a)),
        Command::Train(a) => ("train", commands::train(a)),
        Command::Eval(a) => ("eval", commands::eval(a)),
        Command::Diagnose(a) => ("diagnose", commands::diagnose(a)),
        Command::Sweep(a) => ("sweep", commands::sweep(a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("dmrec {name}: {:#}", failure.error);
            let numeric = failure
                .error
                .chain()
                .any(|e| e.downcast_ref::<dmrec::Error>().is_some_and(dmrec::Error::is_numeric));
            if !numeric {
                return ExitCode::from(2);
            }
            if let Some(dir) = failure.out_dir {
                match commands::write_diagnostics(&dir, name, &failure.error) {
                    Ok(path) => eprintln!("diagnostics written to {}", path.display()),
                    Err(e) => eprintln!("could not write diagnostics: {e:#}"),
                }
            }
            ExitCode::from(3)
        }
    }
}
