use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use manlab_cli::{run, Command, RunArgs};

#[derive(Parser)]
#[command(name = "manlab", version, about = "Train and probe transition-matrix adversarial defenses")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(clap::Args)]
struct Flags {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; must be empty or absent. Defaults to a directory
    /// under $MANLAB_OUT (or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (or checkpoint file) holding target.json and,
    /// optionally, transition.json.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Sub {
    /// Train models under the configured regime.
    Train(Flags),
    /// Accuracy table under the configured attacks.
    Eval(Flags),
    /// Adversarial-example detection scores and AUROC.
    Detect(Flags),
    /// Evaluate a transition network with a different target model.
    Transfer(Flags),
    /// Gradient-masking checks.
    Masking(Flags),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, f) = match cli.command {
        Sub::Train(f) => (Command::Train, f),
        Sub::Eval(f) => (Command::Eval, f),
        Sub::Detect(f) => (Command::Detect, f),
        Sub::Transfer(f) => (Command::Transfer, f),
        Sub::Masking(f) => (Command::Masking, f),
    };
    let args = RunArgs {
        config: f.config,
        out: f.out,
        seed: f.seed,
        checkpoint: f.checkpoint,
    };
    match run(cmd, &args) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
