use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eaaw_cli::{run, thread_cap, CliError, Command, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "eaaw",
    version,
    about = "Embed, extract and verify explanation-based model watermarks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,

    /// Flat key=value experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate the synthetic dataset splits
    GenData,
    /// Train a clean model
    Train,
    /// Embed the watermark into the clean model
    Embed,
    /// Extract watermark bits through the trigger set
    Extract,
    /// Test ownership of the watermarked model
    Verify,
    /// Run the configured removal attacks
    Attack,
    /// Sweep embedding hyperparameters
    Ablate,
    /// Aggregate verification summaries into one table
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GenData => Command::GenData,
            Cmd::Train => Command::Train,
            Cmd::Embed => Command::Embed,
            Cmd::Extract => Command::Extract,
            Cmd::Verify => Command::Verify,
            Cmd::Attack => Command::Attack,
            Cmd::Ablate => Command::Ablate,
            Cmd::Report => Command::Report,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("eaaw: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: &Cli) -> Result<String, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    let threads = thread_cap(std::env::var("EAAW_THREADS").ok().as_deref())?;
    run(cli.cmd.into(), &cfg, threads)
}
