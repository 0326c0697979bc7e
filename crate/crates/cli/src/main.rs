mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hmm_duality::catalog::{self, CatalogModel};

use commands::{Experiment, Overrides, Settings};
use config::ExperimentConfig;
use error::CliError;

/// Filtering, duality and filter-stability experiments for hidden Markov
/// and linear-Gaussian models.
#[derive(Parser)]
#[command(name = "hmm-duality", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a state path and its observation increments.
    Simulate(RunArgs),
    /// Run the Wonham / Zakai (or Kalman-Bucy) filter on a simulated path.
    Filter(RunArgs),
    /// Forward-backward (or two-filter and RTS) smoothing of a simulated path.
    Smooth(RunArgs),
    /// Controllable subspace, observability and stabilizability.
    Analyze(RunArgs),
    /// Monte-Carlo controllability gramian and its numerical rank.
    Gramian(RunArgs),
    /// Dual control cost against Monte-Carlo estimation error.
    DualityCheck(RunArgs),
    /// Poincaré constants and twin-filter divergence bounds.
    Stability(RunArgs),
    /// Ergodic-class detection by a filter with the wrong prior.
    DetectClasses(RunArgs),
    /// Kalman-Bucy filter and Riccati equations.
    Kalman(RunArgs),
    /// Run the experiment named in a config file.
    Run(RunArgs),
    /// List the built-in models.
    Catalog,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Catalog name or path to a JSON model document.
    model: Option<String>,
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for manifest, summary and CSV files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of Monte-Carlo paths.
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Experiment tolerance (rank cutoff for `analyze`).
    #[arg(long)]
    tol: Option<f64>,
    /// Poincaré constant for the chi-square bound.
    #[arg(long)]
    c: Option<f64>,
    /// Rate 1 -> 2 of `two_state`.
    #[arg(long)]
    a1: Option<f64>,
    /// Rate 2 -> 1 of `two_state`.
    #[arg(long)]
    a2: Option<f64>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            model: self.model.clone(),
            seed: self.seed,
            out: self.out.clone(),
            paths: self.paths,
            dt: self.dt,
            horizon: self.horizon,
            tol: self.tol,
            c: self.c,
            a1: self.a1,
            a2: self.a2,
        }
    }
}

fn print_catalog() {
    println!("{:<16} {:<16} {:<6} description", "name", "kind", "dim");
    for e in catalog::entries() {
        let (kind, dim) = match &e.model {
            CatalogModel::Hmm(m) => ("hmm", m.dim()),
            CatalogModel::LinearGaussian(m) => ("linear_gaussian", m.dim()),
        };
        println!("{:<16} {:<16} {:<6} {}", e.name, kind, dim, e.description);
        println!("{:<40}   see: {}", "", e.citation);
    }
}

fn execute(experiment: Option<Experiment>, args: &RunArgs) -> Result<bool, CliError> {
    let cfg = match &args.config {
        Some(path) => config::load_config(path)?,
        None if experiment.is_none() => return Err(CliError::Schema("`run` needs --config".into())),
        None => ExperimentConfig::default(),
    };
    let experiment = match experiment {
        Some(e) => e,
        None => {
            let name = cfg.experiment.as_deref().ok_or_else(|| CliError::Schema("config has no `experiment`".into()))?;
            Experiment::from_name(name).ok_or_else(|| {
                let known: Vec<_> = Experiment::ALL.iter().map(|e| e.name()).collect();
                CliError::Usage(format!("unknown experiment `{name}` (known: {})", known.join(", ")))
            })?
        }
    };
    let settings = Settings::resolve(experiment, &cfg, &args.overrides())?;
    let report = commands::run(&settings)?;
    output::write_artifacts(&settings.out, experiment.name(), &settings.manifest(), &report)?;
    for c in &report.checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("artifacts written to {}", settings.out.display());
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, args) = match cli.command {
        Command::Catalog => {
            print_catalog();
            return ExitCode::SUCCESS;
        }
        Command::Simulate(a) => (Some(Experiment::Simulate), a),
        Command::Filter(a) => (Some(Experiment::Filter), a),
        Command::Smooth(a) => (Some(Experiment::Smooth), a),
        Command::Analyze(a) => (Some(Experiment::Analyze), a),
        Command::Gramian(a) => (Some(Experiment::Gramian), a),
        Command::DualityCheck(a) => (Some(Experiment::DualityCheck), a),
        Command::Stability(a) => (Some(Experiment::Stability), a),
        Command::DetectClasses(a) => (Some(Experiment::DetectClasses), a),
        Command::Kalman(a) => (Some(Experiment::Kalman), a),
        Command::Run(a) => (None, a),
    };
    match execute(experiment, &args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
