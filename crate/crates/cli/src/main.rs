//! `soul`: run federated unlearning sweeps and turn their metrics into
//! figure data.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use soul_core::harness::{self, Axis, Report};
use soul_core::{Arm, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "soul",
    version,
    about = "Federated unlearning simulator for drone networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep and write metrics, summary, resolved config and figure data.
    Run(RunArgs),
    /// Aggregate an existing metrics file into figure data.
    Report {
        /// Metrics CSV written by `soul run`.
        csv: PathBuf,
        /// Directory for the figure files (defaults to the CSV's directory).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print the fully resolved configuration as JSON.
    PrintConfig(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON or TOML configuration file; its values override the base.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the published simulation constants instead of desk defaults.
    #[arg(long = "paper-params")]
    published: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Arms to run (comma separated): soul, retrain, fedau_like.
    #[arg(long, value_delimiter = ',')]
    arm: Vec<Arm>,
    /// Swept parameter: unlearn_clients, unlearn_ratio, alpha or beta.
    #[arg(long)]
    axis: Option<Axis>,
    /// Comma-separated values for the swept parameter.
    #[arg(long, value_delimiter = ',', requires = "axis")]
    values: Vec<f64>,
    /// Number of seeds per sweep point.
    #[arg(long)]
    seeds: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out_dir: PathBuf,
}

/// Failure classified for the exit code.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let base = if args.published {
        ExperimentConfig::published_setup()
    } else {
        ExperimentConfig::default()
    };
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::load_over(&base, path)
            .with_context(|| format!("loading {}", path.display()))
            .map_err(Failure::Config)?,
        None => base,
    };
    Ok(cfg.resolved())
}

fn classify(e: soul_core::Error) -> Failure {
    if e.is_config_error() {
        Failure::Config(e.into())
    } else {
        Failure::Runtime(e.into())
    }
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.config)?;
    if !args.arm.is_empty() {
        let mut arms = args.arm.clone();
        arms.sort();
        arms.dedup();
        cfg.arms = arms;
    }
    if let Some(seeds) = args.seeds {
        cfg.seeds = seeds;
    }
    cfg.validate().map_err(|e| Failure::Config(e.into()))?;

    let axis = args.axis.unwrap_or(Axis::UnlearnRatio);
    let values = if args.values.is_empty() {
        vec![axis.current(&cfg)]
    } else {
        args.values.clone()
    };
    for &v in &values {
        axis.apply(&cfg, v).map_err(|e| Failure::Config(e.into()))?;
    }

    harness::run_sweep_to_dir(&cfg, axis, &values, &args.out_dir).map_err(classify)?;
    let text =
        harness::report(args.out_dir.join("metrics.csv"), &args.out_dir).map_err(classify)?;
    println!("axis {} -> {}", axis.as_str(), args.out_dir.display());
    print!("{text}");
    Ok(())
}

fn report(csv: PathBuf, out_dir: Option<PathBuf>) -> Result<(), Failure> {
    let out = out_dir.unwrap_or_else(|| {
        csv.parent()
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."))
    });
    let rows = harness::read_rows(&csv)
        .with_context(|| format!("reading {}", csv.display()))
        .map_err(Failure::Runtime)?;
    let rep = Report::from_rows(&rows).map_err(|e| Failure::Runtime(e.into()))?;
    rep.write(&out).map_err(|e| Failure::Runtime(e.into()))?;
    print!("{}", rep.summary_text());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args),
        Command::Report { csv, out_dir } => report(csv, out_dir),
        Command::PrintConfig(args) => load_config(&args).and_then(|cfg| {
            cfg.validate().map_err(|e| Failure::Config(e.into()))?;
            let text =
                serde_json::to_string_pretty(&cfg).map_err(|e| Failure::Runtime(e.into()))?;
            println!("{text}");
            Ok(())
        }),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
