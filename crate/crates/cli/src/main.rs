use std::path::PathBuf;
use std::process::ExitCode;

use avflow_core::harness::{exit_code, run, Command, CommandArgs};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "avflow", version, about = "One-step average-velocity forecasting laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a synthetic world and write the dataset.
    GenData(Common),
    /// Stage-I transport pretraining.
    TrainStage1(Common),
    /// Stage-II curriculum CRPS fine-tuning of a checkpoint.
    FinetuneStage2(Common),
    /// Ensemble rollouts scored by RMSE, spread, SSR and CRPS.
    Evaluate(Common),
    /// Check the rollout error bound against simulated chains.
    VerifyBound(Common),
    /// Compare sample CRPS with the W1 distance to the observation.
    CheckCrpsW1(Common),
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set stage1.lr_max=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Dataset file; generated from the world config when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use the analytic affine oracle instead of a checkpoint.
    #[arg(long)]
    oracle: bool,
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("AVF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| format!("AVF_THREADS must be a positive integer, got `{v}`"))?;
    if n == 0 {
        return Err("AVF_THREADS must be a positive integer".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(msg) = init_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let (command, c) = match cli.command {
        Cmd::GenData(c) => (Command::GenData, c),
        Cmd::TrainStage1(c) => (Command::TrainStage1, c),
        Cmd::FinetuneStage2(c) => (Command::FinetuneStage2, c),
        Cmd::Evaluate(c) => (Command::Evaluate, c),
        Cmd::VerifyBound(c) => (Command::VerifyBound, c),
        Cmd::CheckCrpsW1(c) => (Command::CheckCrpsW1, c),
    };
    let args = CommandArgs {
        command,
        config: c.config,
        sets: c.sets,
        seed: c.seed,
        out: c.out,
        dataset: c.dataset,
        checkpoint: c.checkpoint,
        oracle: c.oracle,
    };
    match run(&args) {
        Ok(m) => {
            println!("{}: wrote {} files under {}", command.name(), m.files.len(), args.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
