use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use myksoda::harness::{cli_baseline_prox, cli_lemma_check, cli_run, cli_sweep};

#[derive(Parser)]
#[command(name = "myksoda", version, about = "Regularized Kohn-Sham iteration on lattice models")]
struct Cli {
    /// Output directory; overrides `output.dir` from the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured iteration.
    Run { config: PathBuf },
    /// Run the cartesian product of the swept parameters.
    Sweep { config: PathBuf },
    /// Run the numerical lemma checks.
    LemmaCheck { config: PathBuf },
    /// Run the proximal-point baseline on the tabulated functional.
    BaselineProx { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("debug"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let output = cli.output.as_deref();
    let code = match &cli.command {
        Command::Run { config } => cli_run(config, output),
        Command::Sweep { config } => cli_sweep(config, output),
        Command::LemmaCheck { config } => cli_lemma_check(config, output),
        Command::BaselineProx { config } => cli_baseline_prox(config, output),
    };
    ExitCode::from(code as u8)
}
