use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use perpcs_cli::{exit_code, table, Options, RunConfig, Runner};

#[derive(Parser)]
#[command(name = "perpcs", version, about = "Share adapter pieces between users and assemble personal adapters without training")]
struct Cli {
    /// TOML run config; built-in defaults when omitted.
    #[arg(long, global = true, env = "PERPCS_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, env = "PERPCS_SEED")]
    seed: Option<u64>,
    /// Threads for per-user work. 1 gives bit-reproducible artifacts.
    #[arg(long, global = true, env = "PERPCS_WORKERS", default_value_t = 1)]
    workers: usize,
    /// Re-run stages even when their outputs are current.
    #[arg(long, global = true, env = "PERPCS_FORCE")]
    force: bool,
    /// Artifact directory; overrides `out_dir` in the config.
    #[arg(long, global = true, env = "PERPCS_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[arg(long, short, global = true, env = "PERPCS_QUIET")]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and user splits.
    GenData,
    /// Pretrain the base model and merge a task adapter.
    AdaptBase,
    /// Select sharers and train their adapters.
    TrainSharers,
    /// Train gate vectors for every sharer's pieces.
    TrainGates,
    /// Seal shared pieces and gates into the pool.
    BuildPool,
    /// Assemble a recipe for every target user.
    Assemble,
    /// Compare all methods on the target users.
    Evaluate,
    /// Sharer-count, strategy, share-ratio, activity and ablation sweeps.
    Sweep,
    /// Time assembly against per-user training and compare storage.
    Bench,
    /// Print one target's recipe slot by slot.
    InspectRecipe {
        #[arg(long)]
        user: u32,
    },
    /// Every stage in order.
    RunAll,
    /// Print the effective config as TOML.
    ShowConfig,
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Command::ShowConfig = cli.command {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let out_dir = cli
        .out_dir
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs/default"));
    let mut runner = Runner::new(Options {
        config,
        out_dir,
        workers: cli.workers,
        force: cli.force,
        quiet: cli.quiet,
    })?;
    match cli.command {
        Command::GenData => drop(runner.gen_data()?),
        Command::AdaptBase => drop(runner.adapt_base()?),
        Command::TrainSharers => drop(runner.train_sharers()?),
        Command::TrainGates => drop(runner.train_gates()?),
        Command::BuildPool => drop(runner.build_pool()?),
        Command::Assemble => drop(runner.assemble()?),
        Command::Evaluate => drop(runner.evaluate()?),
        Command::Sweep => drop(runner.sweep()?),
        Command::Bench => drop(runner.bench()?),
        Command::InspectRecipe { user } => print!("{}", runner.inspect_recipe(user)?),
        Command::RunAll => {
            let s = runner.run_all()?;
            print!("{}", table(&s.matrix));
            println!("{}", s.efficiency.summary());
            println!("artifacts in {}", runner.out_dir().display());
        }
        Command::ShowConfig => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
