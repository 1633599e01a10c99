use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hjlab_cli::{preset, run_experiment, CliError, ExperimentConfig, StageStatus};

/// Numerical experiments on degenerate viscous Hamilton–Jacobi equations.
#[derive(Debug, Parser)]
#[command(name = "hjlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every stage of a configuration file.
    Run {
        config: PathBuf,
        /// Override the output directory of the configuration.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a built-in configuration, or run it.
    Preset {
        name: String,
        /// Print the configuration as TOML instead of running it.
        #[arg(long)]
        emit_config: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a configuration without computing anything.
    Validate { config: PathBuf },
}

fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io { path: path.display().to_string(), source: e })?;
    ExperimentConfig::from_toml(&text)
}

fn run(mut config: ExperimentConfig, out: Option<PathBuf>) -> Result<ExitCode, CliError> {
    if let Some(dir) = out {
        config.output.directory = dir;
    }
    let outcome = run_experiment(&config)?;
    for stage in &outcome.manifest.stages {
        let status = match stage.status {
            StageStatus::Passed => "passed",
            StageStatus::Failed => "FAILED",
            StageStatus::Skipped => "skipped",
        };
        let detail = match (&stage.error, &stage.skipped_because) {
            (Some(e), _) => format!(": {e}"),
            (None, Some(dep)) => format!(" (depends on {dep})"),
            (None, None) => String::new(),
        };
        println!("{:<16} {status:<8} {:>9.2}s{detail}", stage.name, stage.wall_time);
    }
    println!("outputs in {}", outcome.directory.display());
    Ok(if outcome.manifest.all_passed() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn dispatch(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Run { config, out } => run(load(&config)?, out),
        Command::Preset { name, emit_config: true, .. } => {
            print!("{}", preset(&name)?.to_toml());
            Ok(ExitCode::SUCCESS)
        }
        Command::Preset { name, out, .. } => run(preset(&name)?, out),
        Command::Validate { config } => {
            let c = load(&config)?;
            println!("{}: valid, {} stages", c.name, c.stages.len());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
