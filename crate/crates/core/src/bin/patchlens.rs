// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use patchlens::experiment::{
    cmd_hooks, cmd_patch, cmd_plot, cmd_score, Experiment, ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "patchlens",
    version,
    about = "Activation patching for neural ranking models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Score baseline and perturbed inputs into scores.tsv.
    Score(Common),
    /// Run head or block patching over the sampled pairs.
    Patch(Common),
    /// Render a matrix JSON file as an SVG heatmap.
    Plot {
        /// Experiment config; its output directory supplies the defaults.
        #[arg(long, required_unless_present = "matrix")]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Matrix file; defaults to `aggregate.json` in the output directory.
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Print every hook name of the configured model.
    Hooks(Common),
}

enum Failure {
    Config(patchlens::Error),
    Runtime(patchlens::Error),
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(Failure::Config)
}

fn experiment(path: &PathBuf) -> Result<Experiment, Failure> {
    Experiment::load(load(path)?).map_err(Failure::Config)
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    match cli.command {
        Command::Score(c) => {
            let exp = experiment(&c.config)?;
            let report = cmd_score(&exp, c.out.as_deref()).map_err(Failure::Runtime)?;
            eprintln!(
                "scored {} pairs ({} failed) into {}",
                report.ok,
                report.errors,
                report.out_dir.join("scores.tsv").display()
            );
            Ok(if report.errors > 0 {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Patch(c) => {
            let exp = experiment(&c.config)?;
            let (report, _) = cmd_patch(&exp, c.out.as_deref()).map_err(Failure::Runtime)?;
            eprintln!(
                "{} ok, {} degenerate (excluded from the aggregate), {} failed; outputs in {}",
                report.ok,
                report.degenerate,
                report.errors,
                report.out_dir.display()
            );
            Ok(if report.errors > 0 {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Plot {
            config,
            out,
            matrix,
        } => {
            let config = config.as_ref().map(load).transpose()?;
            let dir = out
                .or_else(|| config.as_ref().map(|c| c.output_dir.clone()))
                .or_else(|| matrix.as_ref().and_then(|m| m.parent().map(PathBuf::from)))
                .unwrap_or_else(|| PathBuf::from("."));
            let matrix = matrix.unwrap_or_else(|| dir.join("aggregate.json"));
            let stem = matrix
                .file_stem()
                .map_or_else(|| "heatmap".into(), |s| s.to_string_lossy().into_owned());
            std::fs::create_dir_all(&dir).map_err(|e| {
                Failure::Runtime(patchlens::Error::Io {
                    path: dir.clone(),
                    source: e,
                })
            })?;
            let svg = dir.join(format!("{stem}.svg"));
            cmd_plot(&matrix, &svg).map_err(Failure::Runtime)?;
            eprintln!("wrote {}", svg.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Hooks(c) => {
            print!("{}", cmd_hooks(&load(&c.config)?));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
