use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use groupsparse_cli::stages::{run_all, run_stage, Context, Stage};
use groupsparse_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "gbp", version, about = "Group basis pursuit experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dictionary and the labeled data splits.
    GenData(Common),
    /// Sparse-code every split with the configured solvers.
    Solve(Common),
    /// Generate certified instances and check the recovery claims.
    Certify(Common),
    /// Fit classifiers and feedforward approximators.
    Train(Common),
    /// Run the I-FGSM sweeps and the attack-free group statistics.
    Attack(Common),
    /// Render charts and the markdown report.
    Report(Common),
    /// Every stage that applies to the experiment, in order.
    Run(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for per-sample work (default: available cores).
    #[arg(long)]
    jobs: Option<usize>,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let (stage, args) = match cli.command {
        Command::GenData(a) => (Some(Stage::GenData), a),
        Command::Solve(a) => (Some(Stage::Solve), a),
        Command::Certify(a) => (Some(Stage::Certify), a),
        Command::Train(a) => (Some(Stage::Train), a),
        Command::Attack(a) => (Some(Stage::Attack), a),
        Command::Report(a) => (Some(Stage::Report), a),
        Command::Run(a) => (None, a),
    };
    let mut cfg = ExperimentConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out = out;
    }
    if args.jobs == Some(0) {
        return Err(CliError::Config("--jobs: must be at least 1".into()));
    }
    let jobs = args.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let ctx = Context::new(cfg, jobs);
    print!("{}", ctx.cfg.resolved(true));
    println!("# config_hash = \"{}\"", ctx.hash);
    match stage {
        Some(stage) => run_stage(&ctx, stage),
        None => run_all(&ctx),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
