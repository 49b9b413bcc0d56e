//! `momentfit` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use momentfit::bounds::{plugin_bounds, population_bounds};
use momentfit::gel::{divergence, gel_estimate, GelConfig};
use momentfit::montecarlo::{run_experiment, run_rate_experiment, ExperimentConfig, RunOptions};
use momentfit::{cue, gmm_fixed, gmm_two_step, registry, Error, EstimatorConfig, Matrix, MomentModel, Result, Sample};

#[derive(Parser)]
#[command(
    name = "momentfit",
    version,
    about = "GMM and GEL estimation for moment-condition models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args)]
struct Global {
    /// Seed for sampling (overrides `base_seed` in configs).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_path` in configs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Omit the timestamp from JSON reports.
    #[arg(long, global = true)]
    no_timestamp: bool,
    /// Use the uncentered second moment in the CUE weighting.
    #[arg(long, global = true)]
    uncentered: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate θ on one sample and print the result as JSON.
    Estimate {
        #[arg(long, default_value = "normal-mean")]
        problem: String,
        #[arg(long, value_enum, default_value_t = Kind::TwoStep)]
        estimator: Kind,
        /// Divergence id for `gel` (el, et, euclidean).
        #[arg(long, default_value = "el")]
        divergence: String,
        /// Sample size when drawing from the problem's sampler.
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// CSV file with one observation per row instead of a simulated sample.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print efficiency bounds as JSON.
    Bounds {
        #[arg(long, default_value = "normal-mean")]
        problem: String,
        /// Also report the bound of identity-weighted GMM.
        #[arg(long)]
        identity: bool,
        /// Plug-in bounds from this many simulated draws at the true θ
        /// instead of the population moments.
        #[arg(long)]
        plugin_n: Option<usize>,
    },
    /// Run a Monte Carlo experiment from a JSON config.
    Montecarlo { config: PathBuf },
    /// Run an approximation-rate experiment from a JSON config.
    Rate { config: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    /// Identity-weighted GMM
    GmmFixed,
    TwoStep,
    Cue,
    Gel,
}

fn read_data(path: &Path) -> Result<Sample> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if i == 0 => continue, // header
            Err(e) => {
                return Err(Error::InvalidProblem(format!(
                    "{}: line {}: {e}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    Sample::from_rows(&rows)
}

fn print_json<S: serde::Serialize>(value: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let opts = RunOptions {
        seed: g.seed,
        output_path: g.out.clone(),
        no_timestamp: g.no_timestamp,
        uncentered: g.uncentered,
    };
    match cli.command {
        Command::Estimate {
            problem,
            estimator,
            divergence: div,
            n,
            data,
        } => {
            let p = registry::problem::<f64>(&problem)?;
            let sample = match data {
                Some(path) => read_data(&path)?,
                None => p.sample(n, g.seed.unwrap_or(0))?,
            };
            let cfg = EstimatorConfig {
                uncentered: g.uncentered,
                ..EstimatorConfig::default()
            };
            let est = match estimator {
                Kind::GmmFixed => gmm_fixed(&p, &sample, &Matrix::identity(p.k(), p.k()), &cfg)?,
                Kind::TwoStep => gmm_two_step(&p, &sample, &cfg)?,
                Kind::Cue => cue(&p, &sample, &cfg)?,
                Kind::Gel => {
                    let d = divergence::<f64>(&div)?;
                    let gcfg = GelConfig {
                        estimator: cfg,
                        ..GelConfig::default()
                    };
                    gel_estimate(&p, &sample, &d, &gcfg)?.estimate
                }
            };
            print_json(&est.summary())
        }
        Command::Bounds {
            problem,
            identity,
            plugin_n,
        } => {
            let p = registry::problem::<f64>(&problem)?;
            let eye = Matrix::identity(p.k(), p.k());
            let m = identity.then_some(&eye);
            let report = match plugin_n {
                None => population_bounds(&p, m)?,
                Some(n) => {
                    let theta = p
                        .true_theta()
                        .ok_or_else(|| Error::InvalidProblem(format!("problem {problem} has no true theta")))?
                        .to_vec();
                    plugin_bounds(&p, &theta, &p.sample(n, g.seed.unwrap_or(0))?, m)?
                }
            };
            print_json(&report.summary())
        }
        Command::Montecarlo { config } => {
            let out = run_experiment(ExperimentConfig::from_path(&config)?, &opts)?;
            eprintln!("wrote {}", out.csv_path.display());
            eprintln!("wrote {}", out.report_path.display());
            print_json(&out.report)
        }
        Command::Rate { config } => {
            let out = run_rate_experiment(ExperimentConfig::from_path(&config)?, &opts)?;
            for p in &out.csv_paths {
                eprintln!("wrote {}", p.display());
            }
            eprintln!("wrote {}", out.report_path.display());
            print_json(&out.report)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
