mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Dual-scale vision-language MIL on patch-feature bags.
#[derive(Parser)]
#[command(name = "vila", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Synth(Common),
    /// Train and evaluate one run
    Train(Common),
    /// Repeated few-shot runs with mean ± std
    Experiment(Common),
    /// The fixed ablation grid with paired t-tests against the full model
    Ablate(Common),
    /// Sweep one hyperparameter
    Sweep(Common),
    /// Prototype assignment of every high-scale patch of a bag
    Explain(Common),
    /// Finite-difference check of every gradient
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; replaces synth.seed and train.seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: out/<command>)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config overrides such as model.tau=0.1
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn exit_code(e: &vila_core::Error) -> ExitCode {
    if e.is_numerical() {
        ExitCode::from(3)
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Synth(c) => ("synth", c),
        Command::Train(c) => ("train", c),
        Command::Experiment(c) => ("experiment", c),
        Command::Ablate(c) => ("ablate", c),
        Command::Sweep(c) => ("sweep", c),
        Command::Explain(c) => ("explain", c),
        Command::Gradcheck(c) => ("gradcheck", c),
    };
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("out").join(name));
    let result = config::resolve(common.config.as_deref(), &common.overrides, common.seed).and_then(|cfg| {
        match &cli.command {
            Command::Synth(_) => commands::synth(&cfg, &out),
            Command::Train(_) => commands::train(&cfg, &out),
            Command::Experiment(_) => commands::experiment(&cfg, &out),
            Command::Ablate(_) => commands::ablate(&cfg, &out),
            Command::Sweep(_) => commands::sweep(&cfg, &out),
            Command::Explain(_) => commands::explain(&cfg, &out),
            Command::Gradcheck(_) => {
                return commands::gradcheck(&cfg, &out).map(|ok| if ok { 0 } else { 3 });
            }
        }
        .map(|()| 0)
    });
    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
