use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gpssm_cli::commands::{self, Options};
use gpssm_cli::config::Config;
use gpssm_cli::CliError;

#[derive(Parser)]
#[command(name = "gpssm", version, about = "Variational GP state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample trajectories from a GP-SSM prior or the kink system.
    Simulate(Common),
    /// Train on an observation CSV, optionally resuming an archive.
    Train(Common),
    /// Predictive transition on a grid, at points, or as rollouts.
    Predict(Common),
    /// Score an archive on held-out state pairs.
    Eval(Common),
    /// Absorb an observation stream into an archive segment by segment.
    Online(Common),
    /// Print the default configuration.
    DumpDefaults,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    archive: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config thread count.
    #[arg(long)]
    threads: Option<usize>,
}

impl From<Common> for Options {
    fn from(c: Common) -> Self {
        Options {
            config: c.config,
            data: c.data,
            archive: c.archive,
            out: c.out,
            seed: c.seed,
            threads: c.threads,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Simulate(c) => {
            for path in commands::simulate(&c.into())? {
                println!("{}", path.display());
            }
        }
        Command::Train(c) => {
            commands::train(&c.into(), &mut stdout)?;
        }
        Command::Predict(c) => {
            commands::predict(&c.into())?;
        }
        Command::Eval(c) => {
            commands::eval(&c.into(), &mut stdout)?;
        }
        Command::Online(c) => {
            commands::online(&c.into(), &mut stdout)?;
        }
        Command::DumpDefaults => print!("{}", Config::default().dump()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
