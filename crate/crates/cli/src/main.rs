use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use kanvox_cli::compare::{cmd_compare, CompareMode};
use kanvox_cli::config::ExperimentConfig;
use kanvox_cli::report::cmd_report;
use kanvox_cli::run::cmd_run;
use kanvox_cli::synth::cmd_synth;
use kanvox_core::preprocess::SynthSpec;

#[derive(Parser)]
#[command(
    name = "kanvox",
    version,
    about = "CNN, ConvKAN and GCN classifiers for 2D/3D MRI, with validation protocols and comparison statistics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom cohort and its manifest.
    Synth {
        #[arg(long, value_parser = clap::value_parser!(u64).range(4..))]
        subjects: u64,
        #[arg(long, default_value_t = 0.5)]
        effect: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        /// Volume edge length in voxels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value = "synthetic")]
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the configured models under one protocol.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare models from one or more metrics.csv tables.
    Compare {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = CompareMode::Paired)]
        mode: CompareMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Emit heatmap, ROC and CV plot data plus SVGs from run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            subjects,
            effect,
            noise,
            size,
            name,
            seed,
            out,
        } => {
            let mut spec = SynthSpec::new(subjects as usize, effect, noise, seed);
            spec.size = size;
            spec.dataset_name = name;
            println!("{}", cmd_synth(&spec, &out)?.display());
        }
        Command::Run {
            config,
            out,
            seed,
            jobs,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(out) = out {
                cfg.output = out;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let summary = cmd_run(&cfg, jobs)?;
            println!("{}", summary.output.join("metrics.csv").display());
        }
        Command::Compare {
            metrics,
            out,
            mode,
            seed,
        } => {
            cmd_compare(&metrics, &out, mode, seed)?;
            println!("{}", out.display());
        }
        Command::Report { runs, out } => {
            cmd_report(&runs, &out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
