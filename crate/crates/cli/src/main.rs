//! `buildout`: file-to-file pipeline from lot transactions to buildout
//! forecasts.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use buildout_core::Execution;
use clap::{Parser, Subcommand};

use crate::commands::Run;
use crate::config::{OneHop, RunConfig};
use crate::error::Failure;

#[derive(Debug, Parser)]
#[command(name = "buildout", version, about = "Lot-ownership Markov forecasting pipeline")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Run every stage on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct YearFlags {
    /// Platted lots (defaults to the number of lots in the transactions).
    #[arg(long)]
    platted: Option<i64>,
    #[arg(long)]
    first_year: Option<i32>,
    #[arg(long)]
    last_year: Option<i32>,
}

#[derive(Debug, clap::Args)]
struct EstimateFlags {
    /// Constraint scenario JSON.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Widen every bound by this factor (>= 1).
    #[arg(long)]
    relax: Option<f64>,
    /// Bound each transition by its one-hop frequency ± z standard errors.
    #[arg(long)]
    one_hop_z: Option<f64>,
}

#[derive(Debug, clap::Args)]
struct ForecastFlags {
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    mc_runs: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tally yearly category counts: observations.csv.
    Ingest {
        #[arg(long)]
        transactions: PathBuf,
        #[command(flatten)]
        years: YearFlags,
    },
    /// Fit yearly transition matrices: matrices.json, residuals.csv.
    Estimate {
        #[arg(long)]
        observations: PathBuf,
        /// Lot histories, needed for one-hop bounds.
        #[arg(long)]
        transactions: Option<PathBuf>,
        #[command(flatten)]
        estimate: EstimateFlags,
    },
    /// Smooth, forecast and add Monte Carlo bands: forecast.csv,
    /// forecast.json, forecast_matrices.json.
    Forecast {
        #[arg(long)]
        observations: PathBuf,
        #[arg(long)]
        matrices: PathBuf,
        #[arg(long)]
        platted: Option<i64>,
        #[command(flatten)]
        forecast: ForecastFlags,
    },
    /// Regime labels and CUSUM charts: regimes.json, cusum.csv.
    Regimes {
        #[arg(long)]
        matrices: PathBuf,
        #[arg(long)]
        k_max: Option<usize>,
    },
    /// Time-to-permit pmfs and expected permits: pmf_*.json,
    /// expected_permits.csv.
    Bayes {
        #[arg(long)]
        transactions: PathBuf,
        #[arg(long)]
        as_of_year: Option<i32>,
        #[arg(long)]
        horizon: Option<u32>,
    },
    /// Synthetic market from the config's `synth` section: transactions.csv,
    /// truth.json.
    Synth {
        #[arg(long)]
        years: Option<usize>,
    },
    /// Headline numbers: report.json. With --transactions, runs every stage
    /// first.
    Report {
        #[arg(long, conflicts_with = "transactions", required_unless_present = "transactions")]
        forecast_json: Option<PathBuf>,
        #[arg(long, requires = "forecast_json")]
        regimes_json: Option<PathBuf>,
        #[arg(long)]
        transactions: Option<PathBuf>,
        #[command(flatten)]
        years: YearFlags,
        #[command(flatten)]
        estimate: EstimateFlags,
        #[command(flatten)]
        forecast: ForecastFlags,
    },
}

fn apply_years(cfg: &mut RunConfig, y: &YearFlags) {
    cfg.platted = y.platted.or(cfg.platted);
    cfg.first_year = y.first_year.or(cfg.first_year);
    cfg.last_year = y.last_year.or(cfg.last_year);
}

fn apply_estimate(cfg: &mut RunConfig, e: &EstimateFlags) {
    if e.scenario.is_some() {
        cfg.scenario = e.scenario.clone();
    }
    cfg.relax = e.relax.or(cfg.relax);
    if let Some(z) = e.one_hop_z {
        cfg.one_hop.get_or_insert_with(OneHop::default).z = z;
    }
}

fn apply_forecast(cfg: &mut RunConfig, f: &ForecastFlags) {
    if let Some(h) = f.horizon {
        cfg.forecast.horizon = h;
    }
    if let Some(n) = f.mc_runs {
        cfg.forecast.mc_runs = n;
    }
    if let Some(a) = f.alpha {
        cfg.forecast.alpha = a;
    }
}

/// Config file first, then flags.
fn effective_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg = cfg.with_seed(seed);
    match &cli.command {
        Command::Ingest { years, .. } => apply_years(&mut cfg, years),
        Command::Estimate { estimate, .. } => apply_estimate(&mut cfg, estimate),
        Command::Forecast { platted, forecast, .. } => {
            cfg.platted = platted.or(cfg.platted);
            apply_forecast(&mut cfg, forecast);
        }
        Command::Regimes { k_max, .. } => {
            if let Some(k) = k_max {
                cfg.regimes.k_max = *k;
            }
        }
        Command::Bayes { as_of_year, horizon, .. } => {
            cfg.bayes.as_of_year = as_of_year.or(cfg.bayes.as_of_year);
            if let Some(h) = horizon {
                cfg.bayes.horizon = *h;
            }
        }
        Command::Synth { years } => {
            if let (Some(y), Some(s)) = (years, cfg.synth.as_mut()) {
                s.years = *y;
            }
        }
        Command::Report { years, estimate, forecast, .. } => {
            apply_years(&mut cfg, years);
            apply_estimate(&mut cfg, estimate);
            apply_forecast(&mut cfg, forecast);
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, Failure> {
    let config = effective_config(&cli)?;
    let run = Run {
        hash: config.hash(),
        config,
        out: cli.out,
        exec: if cli.sequential { Execution::Sequential } else { Execution::Parallel },
    };
    match cli.command {
        Command::Ingest { transactions, .. } => run.ingest(&transactions),
        Command::Estimate { observations, transactions, .. } => run.estimate(&observations, transactions.as_deref()),
        Command::Forecast { observations, matrices, .. } => run.forecast(&observations, &matrices),
        Command::Regimes { matrices, .. } => run.regimes(&matrices),
        Command::Bayes { transactions, .. } => run.bayes(&transactions),
        Command::Synth { .. } => run.synth(),
        Command::Report { forecast_json: Some(f), regimes_json, .. } => run.report_from(&f, regimes_json.as_deref()),
        Command::Report { transactions: Some(t), .. } => run.report_pipeline(&t),
        Command::Report { .. } => unreachable!("clap requires --forecast-json or --transactions"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{}", f.record());
            ExitCode::from(f.kind.exit_code() as u8)
        }
    }
}
