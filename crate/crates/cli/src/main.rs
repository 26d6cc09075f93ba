use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod output;

#[derive(Parser)]
#[command(name = "qntrpo", version, about = "Quasi-Newton trust-region optimization and policy search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Minimize a deterministic test function with QNTRM.
    Optimize {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `key.path=value`, applied after the file is parsed. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train a policy with QNTRPO or TRPO.
    Train {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; defaults to the config's seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run two training configs on the same seeds and compare them.
    Compare {
        config_a: PathBuf,
        config_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; defaults to 0,1,2,3,4.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Applied to both configs.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QNTRPO_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Optimize { config, out, overrides } => commands::optimize(config, out, overrides),
        Command::Train { config, out, seeds, overrides } => commands::train_cmd(config, out, seeds, overrides),
        Command::Compare { config_a, config_b, out, seeds, overrides } => {
            commands::compare_cmd(config_a, config_b, out, seeds, overrides)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
