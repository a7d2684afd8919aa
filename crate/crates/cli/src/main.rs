//! `bumpkit` command-line driver.
//!
//! Exit codes: 0 on success, 2 for invalid input (arguments, config files,
//! parameters), 3 for numerical failures.

mod args;
mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command, ConfigFile, Overlay};
use commands::{Artifact, RunInfo};
use error::CliError;

fn write_artifacts(dir: &PathBuf, artifacts: &[Artifact]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for a in artifacts {
        let path = dir.join(a.name);
        std::fs::write(&path, &a.bytes).map_err(|e| CliError::io(&path, e))?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let threads = cli.threads.or(cfg.threads);
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::Spec("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Spec(format!("thread pool: {e}")))?;
    }
    let run = RunInfo {
        command: cli.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed: cli.seed.or(cfg.seed).unwrap_or(0),
        threads: rayon::current_num_threads(),
    };
    let out_dir = cli
        .out_dir
        .or(cfg.out_dir)
        .unwrap_or_else(|| PathBuf::from("bumpkit-out"));
    log::info!(
        "{} v{} seed {} threads {}",
        run.command,
        run.version,
        run.seed,
        run.threads
    );
    let artifacts = match cli.command {
        Command::GroundState(a) => commands::ground_state(&run, a.overlay(cfg.ground_state))?,
        Command::Kernel(a) => commands::kernel(&run, a.overlay(cfg.kernel))?,
        Command::Relax(a) => commands::relax_cmd(&run, a.overlay(cfg.relax))?,
        Command::Solve(a) => commands::solve(&run, a.overlay(cfg.solve))?,
        Command::Continuation(a) => commands::continuation(&run, a.overlay(cfg.continuation))?,
        Command::Verify(a) => commands::verify(&run, a.overlay(cfg.verify))?,
        Command::Pipeline(a) => commands::pipeline(&run, a.overlay(cfg.pipeline))?,
    };
    write_artifacts(&out_dir, &artifacts)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bumpkit: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
