use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use interleave_cli::run::{run_serve, run_verb, Overrides, Verb};

#[derive(Parser)]
#[command(name = "interleave", version, about = "Interleaved multi-agent training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Runs only this seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the safety bound, monotonicity and convergence.
    Verify(Common),
    /// Train and check the improvement over warm-up.
    Train(Common),
    /// Compare configuration arms.
    Ablate(Common),
    /// Serve frozen policies over TCP.
    Serve(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (verb, common) = match cli.command {
        Command::Verify(c) => (Verb::Verify, c),
        Command::Train(c) => (Verb::Train, c),
        Command::Ablate(c) => (Verb::Ablate, c),
        Command::Serve(c) => return code(run_serve(&c.config, c.out.as_deref())),
    };
    let overrides = Overrides {
        out: common.out,
        seed: common.seed,
    };
    code(run_verb(verb, &common.config, &overrides))
}

fn code(status: i32) -> ExitCode {
    ExitCode::from(status as u8)
}
